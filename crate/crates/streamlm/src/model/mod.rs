//! The toy streaming multimodal decoder: a small pre-norm transformer with
//! gated cross-attention blocks bridging a visual token stream into the text
//! stream, V-FFN experts updating the visual stream between cross blocks,
//! and a frozen toy patch encoder feeding an MLP adapter.

mod net;

pub use net::{
    eval_loss, CachedFrameStages, CrossMode, ForwardOutput, IncrementalState, LossOutput,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{NumError, ParamId, ParamStore, Real, Tensor2D};
use crate::rope3d::{visual_position, Position3D, RopeError, RopeLayout};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("frame format error: {0}")]
    FrameFormat(String),
    #[error("empty loss mask: no supervised positions in batch")]
    DegenerateBatch,
    #[error("mask/visual count mismatch: mask has {mask_cols} columns, visual set has {visual}")]
    MaskMismatch { mask_cols: usize, visual: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A token id paired with its timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedToken {
    pub id: u32,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Linear,
    Tanh,
    None,
}

/// How cross-attention projections relate to the host layer's self-attention
/// projections: shared storage, an init-time copy free to diverge, or a
/// fresh independent init.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSharing {
    Shared,
    CopiedAtInit,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_mult: f64,
    /// Insert one cross-attention block after every cross_every-th layer.
    pub cross_every: usize,
    pub gate_kind: GateKind,
    pub gate_init: f64,
    pub reuse_params: ParamSharing,
    pub use_vffn: bool,
    pub rope: RopeLayout,
    pub time_scale: f64,
    pub vocab: usize,
    pub patch_grid: (usize, usize),
    pub tokens_per_frame: usize,
    /// Raw per-patch input width fed to the frozen projection.
    pub patch_input_dim: usize,
    /// Output width of the frozen random projection.
    pub proj_dim: usize,
    pub adapter_hidden: usize,
    /// Rows of the frozen symbol table (symbolic frame mode).
    pub symbol_table_size: usize,
    pub rms_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Default toy dimensions: 8 layers, dim 128, 4 heads of 32.
    pub fn toy(vocab: usize) -> Self {
        Self {
            layers: 8,
            model_dim: 128,
            heads: 4,
            head_dim: 32,
            ffn_mult: 2.0,
            cross_every: 2,
            gate_kind: GateKind::Linear,
            gate_init: 1e-4,
            reuse_params: ParamSharing::Shared,
            use_vffn: true,
            rope: RopeLayout::new(32).expect("valid head_dim"),
            time_scale: 1.0,
            vocab,
            patch_grid: (4, 4),
            tokens_per_frame: 16,
            patch_input_dim: 16,
            proj_dim: 32,
            adapter_hidden: 128,
            symbol_table_size: 64,
            rms_eps: 1e-6,
            init_std: 0.02,
        }
    }

    /// Smaller configuration for tests and quick training runs.
    pub fn tiny(vocab: usize) -> Self {
        let mut c = Self::toy(vocab);
        c.layers = 4;
        c.model_dim = 64;
        c.heads = 4;
        c.head_dim = 16;
        c.rope = RopeLayout::new(16).expect("valid head_dim");
        c.patch_grid = (2, 2);
        c.tokens_per_frame = 4;
        c.patch_input_dim = 8;
        c.proj_dim = 16;
        c.adapter_hidden = 64;
        c.ffn_mult = 2.0;
        c
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.model_dim as f64 * self.ffn_mult).round() as usize
    }

    pub fn n_cross_blocks(&self) -> usize {
        self.layers / self.cross_every
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim != self.heads * self.head_dim {
            return Err(ModelError::Config(format!(
                "model_dim {} != heads {} * head_dim {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        if self.cross_every == 0 || self.cross_every > self.layers {
            return Err(ModelError::Config(format!(
                "cross_every {} out of range [1, {}]",
                self.cross_every, self.layers
            )));
        }
        if self.tokens_per_frame != self.patch_grid.0 * self.patch_grid.1 {
            return Err(ModelError::Config(format!(
                "tokens_per_frame {} != patch grid {}x{}",
                self.tokens_per_frame, self.patch_grid.0, self.patch_grid.1
            )));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(ModelError::Config(format!(
                "rope head_dim {} != head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        if self.gate_init < 0.0 {
            return Err(ModelError::Config("gate_init must be >= 0".into()));
        }
        self.rope.validate()?;
        Ok(())
    }
}

/// One raw video frame: either a symbol id (toy symbolic mode) or raw patch
/// values, tokens_per_frame x patch_input_dim row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Frame {
    Symbolic(u32),
    Pixels(Vec<f64>),
}

/// One frame's encoded token grid with its timestamp and per-token positions.
#[derive(Debug, Clone)]
pub struct FrameTokens<T: Real> {
    pub time: f64,
    pub grid: (usize, usize),
    pub tokens: Tensor2D<T>,
    pub positions: Vec<Position3D>,
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub ln1: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2: ParamId,
    pub ffn_gate: ParamId,
    pub ffn_up: ParamId,
    pub ffn_down: ParamId,
}

/// Cross-attention block hosted after a decoder layer. With shared
/// parameters the projection ids alias the host layer's; the V-FFN weights
/// are always copies.
#[derive(Debug, Clone)]
pub struct CrossIds {
    pub host_layer: usize,
    pub ln: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// Per-channel residual gate; absent when gate_kind is none.
    pub gate: Option<ParamId>,
    pub v_ln: ParamId,
    pub vf_gate: ParamId,
    pub vf_up: ParamId,
    pub vf_down: ParamId,
    pub v_out_gate: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub tok_emb: ParamId,
    pub adapter_w1: ParamId,
    pub adapter_b1: ParamId,
    pub adapter_w2: ParamId,
    pub adapter_b2: ParamId,
    pub layers: Vec<LayerIds>,
    pub cross: Vec<CrossIds>,
    pub final_ln: ParamId,
    pub head: ParamId,
}

/// Frozen (never trained) tensors of the toy vision path.
#[derive(Debug, Clone)]
pub struct Frozen<T: Real> {
    pub vision_proj: Tensor2D<T>,
    pub symbol_table: Tensor2D<T>,
}

pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub ids: ModelIds,
    pub frozen: Frozen<T>,
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor2D<T> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        // Box-Muller from two uniforms; deterministic given the rng stream
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        data.push(T::from_f64(z * std));
    }
    Tensor2D::from_vec(rows, cols, data)
}

impl<T: Real> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.model_dim;
        let hid = cfg.ffn_hidden();
        let std = cfg.init_std;

        let tok_emb = store.alloc("tok_emb", normal_tensor(&mut rng, cfg.vocab, d, std));
        let adapter_w1 = store.alloc(
            "adapter.w1",
            normal_tensor(&mut rng, cfg.proj_dim, cfg.adapter_hidden, std),
        );
        let adapter_b1 = store.alloc("adapter.b1", Tensor2D::zeros(1, cfg.adapter_hidden));
        let adapter_w2 = store.alloc(
            "adapter.w2",
            normal_tensor(&mut rng, cfg.adapter_hidden, d, std),
        );
        let adapter_b2 = store.alloc("adapter.b2", Tensor2D::zeros(1, d));

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(LayerIds {
                ln1: store.alloc(format!("layer{l}.ln1"), Tensor2D::full(1, d, T::one())),
                wq: store.alloc(format!("layer{l}.wq"), normal_tensor(&mut rng, d, d, std)),
                wk: store.alloc(format!("layer{l}.wk"), normal_tensor(&mut rng, d, d, std)),
                wv: store.alloc(format!("layer{l}.wv"), normal_tensor(&mut rng, d, d, std)),
                wo: store.alloc(format!("layer{l}.wo"), normal_tensor(&mut rng, d, d, std)),
                ln2: store.alloc(format!("layer{l}.ln2"), Tensor2D::full(1, d, T::one())),
                ffn_gate: store.alloc(
                    format!("layer{l}.ffn_gate"),
                    normal_tensor(&mut rng, d, hid, std),
                ),
                ffn_up: store.alloc(
                    format!("layer{l}.ffn_up"),
                    normal_tensor(&mut rng, d, hid, std),
                ),
                ffn_down: store.alloc(
                    format!("layer{l}.ffn_down"),
                    normal_tensor(&mut rng, hid, d, std),
                ),
            });
        }

        let mut cross = Vec::new();
        for c in 0..cfg.n_cross_blocks() {
            let host_layer = (c + 1) * cfg.cross_every - 1;
            let host = layers[host_layer].clone();
            let (wq, wk, wv, wo) = match cfg.reuse_params {
                ParamSharing::Shared => (host.wq, host.wk, host.wv, host.wo),
                ParamSharing::CopiedAtInit => (
                    store.alloc(format!("cross{c}.wq"), store.value(host.wq).clone()),
                    store.alloc(format!("cross{c}.wk"), store.value(host.wk).clone()),
                    store.alloc(format!("cross{c}.wv"), store.value(host.wv).clone()),
                    store.alloc(format!("cross{c}.wo"), store.value(host.wo).clone()),
                ),
                ParamSharing::Independent => (
                    store.alloc(format!("cross{c}.wq"), normal_tensor(&mut rng, d, d, std)),
                    store.alloc(format!("cross{c}.wk"), normal_tensor(&mut rng, d, d, std)),
                    store.alloc(format!("cross{c}.wv"), normal_tensor(&mut rng, d, d, std)),
                    store.alloc(format!("cross{c}.wo"), normal_tensor(&mut rng, d, d, std)),
                ),
            };
            let gate = match cfg.gate_kind {
                GateKind::Linear => Some(store.alloc(
                    format!("cross{c}.gate"),
                    Tensor2D::full(1, d, T::from_f64(cfg.gate_init)),
                )),
                GateKind::Tanh => Some(store.alloc(format!("cross{c}.gate"), Tensor2D::zeros(1, d))),
                GateKind::None => None,
            };
            let v_out_gate = match cfg.gate_kind {
                GateKind::Linear => Some(store.alloc(
                    format!("cross{c}.v_gate"),
                    Tensor2D::full(1, d, T::from_f64(cfg.gate_init)),
                )),
                GateKind::Tanh => {
                    Some(store.alloc(format!("cross{c}.v_gate"), Tensor2D::zeros(1, d)))
                }
                GateKind::None => None,
            };
            // V-FFN experts start as copies of the host FFN, never aliased
            cross.push(CrossIds {
                host_layer,
                ln: store.alloc(format!("cross{c}.ln"), Tensor2D::full(1, d, T::one())),
                wq,
                wk,
                wv,
                wo,
                gate,
                v_ln: store.alloc(format!("cross{c}.v_ln"), Tensor2D::full(1, d, T::one())),
                vf_gate: store.alloc(
                    format!("cross{c}.vf_gate"),
                    store.value(host.ffn_gate).clone(),
                ),
                vf_up: store.alloc(format!("cross{c}.vf_up"), store.value(host.ffn_up).clone()),
                vf_down: store.alloc(
                    format!("cross{c}.vf_down"),
                    store.value(host.ffn_down).clone(),
                ),
                v_out_gate,
            });
        }

        let final_ln = store.alloc("final_ln", Tensor2D::full(1, d, T::one()));
        let head = store.alloc("head", normal_tensor(&mut rng, d, cfg.vocab, std));

        let frozen = Frozen {
            vision_proj: normal_tensor(&mut rng, cfg.patch_input_dim, cfg.proj_dim, 0.5),
            symbol_table: normal_tensor(
                &mut rng,
                cfg.symbol_table_size,
                cfg.patch_input_dim,
                1.0,
            ),
        };

        Ok(Self {
            cfg,
            store,
            ids: ModelIds {
                tok_emb,
                adapter_w1,
                adapter_b1,
                adapter_w2,
                adapter_b2,
                layers,
                cross,
                final_ln,
                head,
            },
            frozen,
        })
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        (0..self.store.len()).map(ParamId).collect()
    }

    /// Raw per-patch inputs for a frame: tokens_per_frame x patch_input_dim.
    pub fn raw_patches(&self, frame: &Frame) -> Result<Tensor2D<T>> {
        let tpf = self.cfg.tokens_per_frame;
        let pin = self.cfg.patch_input_dim;
        match frame {
            Frame::Symbolic(id) => {
                if *id as usize >= self.cfg.symbol_table_size {
                    return Err(ModelError::FrameFormat(format!(
                        "symbol id {} outside table of {}",
                        id, self.cfg.symbol_table_size
                    )));
                }
                let row = self.frozen.symbol_table.row(*id as usize);
                let mut data = Vec::with_capacity(tpf * pin);
                for _ in 0..tpf {
                    data.extend_from_slice(row);
                }
                Ok(Tensor2D::from_vec(tpf, pin, data))
            }
            Frame::Pixels(px) => {
                if px.len() != tpf * pin {
                    return Err(ModelError::FrameFormat(format!(
                        "pixel frame has {} values, expected {}x{}",
                        px.len(),
                        tpf,
                        pin
                    )));
                }
                Ok(Tensor2D::from_vec(
                    tpf,
                    pin,
                    px.iter().map(|&x| T::from_f64(x)).collect(),
                ))
            }
        }
    }

    /// Encode a raw frame at time t: frozen projection, then the MLP
    /// adapter, then per-patch 3D positions.
    pub fn encode_frame(&self, frame: &Frame, t: f64) -> Result<FrameTokens<T>> {
        let raw = self.raw_patches(frame)?;
        let tokens = self.adapter_forward(&raw)?.0;
        let grid = self.cfg.patch_grid;
        let mut positions = Vec::with_capacity(self.cfg.tokens_per_frame);
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                positions.push(visual_position(t, self.cfg.time_scale, r, c, grid)?);
            }
        }
        Ok(FrameTokens {
            time: t,
            grid,
            tokens,
            positions,
        })
    }

    /// Adapter forward; returns output and the pre-activation needed for
    /// backward: (tokens, projected, pre_act).
    pub(crate) fn adapter_forward(
        &self,
        raw: &Tensor2D<T>,
    ) -> Result<(Tensor2D<T>, Tensor2D<T>, Tensor2D<T>)> {
        let proj = crate::numkit::gemm(raw, &self.frozen.vision_proj)?;
        let mut a = crate::numkit::gemm(&proj, self.store.value(self.ids.adapter_w1))?;
        let b1 = self.store.value(self.ids.adapter_b1);
        for i in 0..a.rows {
            let row = a.row_mut(i);
            for (x, &b) in row.iter_mut().zip(b1.row(0).iter()) {
                *x += b;
            }
        }
        let act = a.map(crate::numkit::silu);
        let mut out = crate::numkit::gemm(&act, self.store.value(self.ids.adapter_w2))?;
        let b2 = self.store.value(self.ids.adapter_b2);
        for i in 0..out.rows {
            let row = out.row_mut(i);
            for (x, &b) in row.iter_mut().zip(b2.row(0).iter()) {
                *x += b;
            }
        }
        Ok((out, proj, a))
    }

    /// Effective per-channel scale of a gate parameter.
    pub(crate) fn gate_scale(&self, id: Option<ParamId>) -> Vec<T> {
        match id {
            None => vec![T::one(); self.cfg.model_dim],
            Some(id) => {
                let g = self.store.value(id);
                match self.cfg.gate_kind {
                    GateKind::Tanh => g.row(0).iter().map(|&x| x.tanh()).collect(),
                    _ => g.row(0).to_vec(),
                }
            }
        }
    }

    /// Set every residual gate to exactly zero.
    pub fn zero_gates(&mut self) {
        let ids: Vec<ParamId> = self
            .ids
            .cross
            .iter()
            .flat_map(|c| [c.gate, c.v_out_gate])
            .flatten()
            .collect();
        for id in ids {
            for v in &mut self.store.value_mut(id).data {
                *v = T::zero();
            }
        }
    }
}
