//! Flat binary container of named f64 tensors.
//!
//! A container is two files sharing a stem:
//!
//! * `<stem>.bin`: the raw tensor payloads, little-endian f64, back to back.
//! * `<stem>.manifest`: UTF-8 text, one tensor per line as
//!   `name<TAB>shape<TAB>byte_offset`, where `shape` is the comma-separated
//!   dimension list (`1` for scalars). Lines starting with `#` are comments.
//!
//! Tensors appear in insertion order, so writing the same store twice gives
//! byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::attention::{AttentionKind, AttentionWeights, MultiHeadConfig, OrthogonalFeatureMatrix};
use crate::blocks::{BlockStack, BlockStackConfig, DcHydraBlock, DilatedConvWeights, FfwWeights, LayerNormParams, MixerKind, MixerWeights};
use crate::error::{MixError, Result};
use crate::ssm::{BiMambaWeights, HydraWeights, SelectiveWeights};

const MANIFEST_HEADER: &str = "# mixlab tensor manifest v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    tensors: Vec<Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
            return Err(MixError::Format(format!("invalid tensor name '{name}'")));
        }
        if self.get(&name).is_some() {
            return Err(MixError::Format(format!("duplicate tensor '{name}'")));
        }
        if shape.iter().product::<usize>() != data.len() || shape.is_empty() {
            return Err(MixError::Format(format!("tensor '{name}': shape {shape:?} does not hold {} values", data.len())));
        }
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) -> Result<()> {
        let (r, c) = m.dim();
        self.insert(name, vec![r, c], m.iter().copied().collect())
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &Array1<f64>) -> Result<()> {
        self.insert(name, vec![v.len()], v.to_vec())
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) -> Result<()> {
        self.insert(name, vec![1], vec![v])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| MixError::Format(format!("missing tensor '{name}'")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.require(name)?;
        match t.shape[..] {
            [r, c] => Array2::from_shape_vec((r, c), t.data.clone()).map_err(|e| MixError::Format(e.to_string())),
            _ => Err(MixError::Format(format!("tensor '{name}' is not a matrix: {:?}", t.shape))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let t = self.require(name)?;
        match t.shape[..] {
            [_] => Ok(Array1::from(t.data.clone())),
            _ => Err(MixError::Format(format!("tensor '{name}' is not a vector: {:?}", t.shape))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        match (&t.shape[..], &t.data[..]) {
            ([1], [v]) => Ok(*v),
            _ => Err(MixError::Format(format!("tensor '{name}' is not a scalar: {:?}", t.shape))),
        }
    }

    /// Paths of the payload and manifest files for `stem` in `dir`.
    pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.manifest")))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let (bin_path, manifest_path) = Self::paths(dir, stem);
        let total: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut payload = Vec::with_capacity(total * 8);
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{}\t{}\t{}\n", t.name, shape.join(","), payload.len()));
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(&bin_path, &payload).map_err(|e| MixError::io(&bin_path, e))?;
        fs::write(&manifest_path, manifest).map_err(|e| MixError::io(&manifest_path, e))?;
        Ok((bin_path, manifest_path))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let (bin_path, manifest_path) = Self::paths(dir, stem);
        let payload = fs::read(&bin_path).map_err(|e| MixError::io(&bin_path, e))?;
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| MixError::io(&manifest_path, e))?;
        let mut store = Self::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| MixError::Format(format!("{}:{}: {what}", manifest_path.display(), lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = fields[..] else {
                return Err(bad("expected name, shape and offset"));
            };
            let shape = shape
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad shape"))?;
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            let count: usize = shape.iter().product();
            let end = offset
                .checked_add(count * 8)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| bad("tensor extends past end of payload"))?;
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            store.insert(name, shape, data)?;
        }
        Ok(store)
    }
}

fn put_selective(store: &mut TensorStore, prefix: &str, w: &SelectiveWeights) -> Result<()> {
    store.insert_vector(format!("{prefix}.w_delta"), &w.w_delta)?;
    store.insert_scalar(format!("{prefix}.delta_bias"), w.delta_bias)?;
    store.insert_matrix(format!("{prefix}.w_b"), &w.w_b)?;
    store.insert_matrix(format!("{prefix}.w_c"), &w.w_c)?;
    store.insert_scalar(format!("{prefix}.a_log"), w.a_log)
}

fn get_selective(store: &TensorStore, prefix: &str) -> Result<SelectiveWeights> {
    Ok(SelectiveWeights {
        w_delta: store.vector(&format!("{prefix}.w_delta"))?,
        delta_bias: store.scalar(&format!("{prefix}.delta_bias"))?,
        w_b: store.matrix(&format!("{prefix}.w_b"))?,
        w_c: store.matrix(&format!("{prefix}.w_c"))?,
        a_log: store.scalar(&format!("{prefix}.a_log"))?,
    })
}

fn put_ffw(store: &mut TensorStore, prefix: &str, w: &FfwWeights) -> Result<()> {
    store.insert_matrix(format!("{prefix}.w1"), &w.w1)?;
    store.insert_vector(format!("{prefix}.b1"), &w.b1)?;
    store.insert_matrix(format!("{prefix}.w2"), &w.w2)?;
    store.insert_vector(format!("{prefix}.b2"), &w.b2)
}

fn get_ffw(store: &TensorStore, prefix: &str) -> Result<FfwWeights> {
    FfwWeights::new(
        store.matrix(&format!("{prefix}.w1"))?,
        store.vector(&format!("{prefix}.b1"))?,
        store.matrix(&format!("{prefix}.w2"))?,
        store.vector(&format!("{prefix}.b2"))?,
    )
}

impl BlockStack {
    /// Tensor names are `block{i}.<submodule>.<param>`.
    pub fn to_store(&self) -> Result<TensorStore> {
        let mut store = TensorStore::new();
        for (i, block) in self.blocks().iter().enumerate() {
            let p = format!("block{i}");
            put_ffw(&mut store, &format!("{p}.ffw_in"), &block.ffw_in)?;
            match &block.mixer {
                MixerWeights::Hydra { weights, out_proj } => {
                    put_selective(&mut store, &format!("{p}.mixer.fwd"), &weights.fwd)?;
                    put_selective(&mut store, &format!("{p}.mixer.bwd"), &weights.bwd)?;
                    store.insert_vector(format!("{p}.mixer.diag_gain"), &weights.diag_gain)?;
                    store.insert_matrix(format!("{p}.mixer.out_proj"), out_proj)?;
                }
                MixerWeights::BiMamba { weights, out_proj } => {
                    put_selective(&mut store, &format!("{p}.mixer.fwd"), &weights.fwd)?;
                    put_selective(&mut store, &format!("{p}.mixer.bwd"), &weights.bwd)?;
                    store.insert_matrix(format!("{p}.mixer.out_proj"), out_proj)?;
                }
                MixerWeights::Attention { weights, kind, .. } => {
                    store.insert_matrix(format!("{p}.mixer.wq"), &weights.wq)?;
                    store.insert_matrix(format!("{p}.mixer.wk"), &weights.wk)?;
                    store.insert_matrix(format!("{p}.mixer.wv"), &weights.wv)?;
                    store.insert_matrix(format!("{p}.mixer.wo"), &weights.wo)?;
                    if let AttentionKind::Favor(omega) = kind {
                        store.insert_matrix(format!("{p}.mixer.omega"), &omega.omega().to_owned())?;
                    }
                }
            }
            store.insert_matrix(format!("{p}.conv.kernel"), block.conv.kernel())?;
            store.insert_vector(format!("{p}.conv.bias"), block.conv.bias())?;
            put_ffw(&mut store, &format!("{p}.ffw_out"), &block.ffw_out)?;
            store.insert_vector(format!("{p}.norm.scale"), &block.norm.scale)?;
            store.insert_vector(format!("{p}.norm.shift"), &block.norm.shift)?;
        }
        Ok(store)
    }

    /// Rebuilds a stack saved by [`BlockStack::to_store`]; `cfg` supplies the
    /// hyperparameters that are not tensors (mixer kind, heads, dilation schedule).
    pub fn from_store(cfg: BlockStackConfig, store: &TensorStore) -> Result<Self> {
        cfg.validate()?;
        let dilations = cfg.dilations()?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for (i, &dilation) in dilations.iter().enumerate() {
            let p = format!("block{i}");
            let mixer = match cfg.mixer {
                MixerKind::Hydra => MixerWeights::Hydra {
                    weights: HydraWeights {
                        fwd: get_selective(store, &format!("{p}.mixer.fwd"))?,
                        bwd: get_selective(store, &format!("{p}.mixer.bwd"))?,
                        diag_gain: store.vector(&format!("{p}.mixer.diag_gain"))?,
                    },
                    out_proj: store.matrix(&format!("{p}.mixer.out_proj"))?,
                },
                MixerKind::BiMamba => MixerWeights::BiMamba {
                    weights: BiMambaWeights {
                        fwd: get_selective(store, &format!("{p}.mixer.fwd"))?,
                        bwd: get_selective(store, &format!("{p}.mixer.bwd"))?,
                    },
                    out_proj: store.matrix(&format!("{p}.mixer.out_proj"))?,
                },
                kind => {
                    let mut att_cfg = MultiHeadConfig::new(cfg.num_heads, cfg.d_model)?;
                    if let Some(base) = cfg.rope_base {
                        att_cfg = att_cfg.with_rope(base)?;
                    }
                    let attention_kind = if kind == MixerKind::Favor {
                        AttentionKind::Favor(OrthogonalFeatureMatrix::from_matrix(store.matrix(&format!("{p}.mixer.omega"))?, 0)?)
                    } else {
                        AttentionKind::Softmax
                    };
                    MixerWeights::Attention {
                        weights: AttentionWeights {
                            wq: store.matrix(&format!("{p}.mixer.wq"))?,
                            wk: store.matrix(&format!("{p}.mixer.wk"))?,
                            wv: store.matrix(&format!("{p}.mixer.wv"))?,
                            wo: store.matrix(&format!("{p}.mixer.wo"))?,
                        },
                        cfg: att_cfg,
                        kind: attention_kind,
                    }
                }
            };
            blocks.push(DcHydraBlock {
                ffw_in: get_ffw(store, &format!("{p}.ffw_in"))?,
                mixer,
                conv: DilatedConvWeights::new(
                    store.matrix(&format!("{p}.conv.kernel"))?,
                    dilation,
                    store.vector(&format!("{p}.conv.bias"))?,
                )?,
                ffw_out: get_ffw(store, &format!("{p}.ffw_out"))?,
                norm: LayerNormParams {
                    scale: store.vector(&format!("{p}.norm.scale"))?,
                    shift: store.vector(&format!("{p}.norm.shift"))?,
                },
            });
        }
        Self::new(cfg, blocks)
    }
}
