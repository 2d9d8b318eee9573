//! Forward, backward, and incremental-decode computation for the toy model.
//!
//! The forward pass is available both through [`Model`] methods and through
//! free functions over an explicit parameter store, so a gradient checker
//! can re-evaluate the loss while perturbing parameters in place.

use std::rc::Rc;

use crate::mask::{build_causal_mask, build_stream_mask, expand_frame_mask};
use crate::numkit::{
    gemm, gemm_backward, masked_softmax_rows, rms_norm, rms_norm_backward, silu, silu_prime,
    softmax_backward_rows, swiglu_backward, swiglu_forward, BoolMat, ParamStore, Real,
    SwigluTrace, Tensor2D,
};
use crate::rope3d::{apply_rope3d, apply_rope3d_inverse, text_position, Position3D};

use super::{Frame, FrameTokens, GateKind, Model, ModelConfig, ModelError, ModelIds, Result, TimedToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMode {
    /// Full model: cross-attention and V-FFN blocks active.
    Normal,
    /// Pure text decoder: cross blocks skipped entirely.
    Skip,
}

pub struct ForwardOutput<T: Real> {
    pub logits: Tensor2D<T>,
    pub(crate) trace: Option<Trace<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: f64,
    pub n_positions: usize,
}

pub(crate) struct AttnTrace<T: Real> {
    pub x_norm: Tensor2D<T>,
    pub qr: Tensor2D<T>,
    pub kr: Tensor2D<T>,
    pub v: Tensor2D<T>,
    pub probs: Vec<Tensor2D<T>>,
    pub attn: Tensor2D<T>,
}

pub(crate) struct LayerTrace<T: Real> {
    pub h_in: Tensor2D<T>,
    pub sa: AttnTrace<T>,
    pub h_mid: Tensor2D<T>,
    pub x2: Tensor2D<T>,
    pub ffn: SwigluTrace<T>,
}

pub(crate) struct CrossTrace<T: Real> {
    pub h_in: Tensor2D<T>,
    pub attn: AttnTrace<T>,
    pub z: Tensor2D<T>,
    pub vx: Option<Tensor2D<T>>,
    pub vffn: Option<SwigluTrace<T>>,
    pub vf_out: Option<Tensor2D<T>>,
}

pub(crate) struct Trace<T: Real> {
    pub text_ids: Vec<u32>,
    pub text_pos: Vec<Position3D>,
    pub vis_pos: Vec<Position3D>,
    pub adapter: Option<AdapterTrace<T>>,
    pub stages: Vec<Tensor2D<T>>,
    pub layers: Vec<LayerTrace<T>>,
    pub cross: Vec<CrossTrace<T>>,
    pub h_final: Tensor2D<T>,
    pub hf: Tensor2D<T>,
}

pub(crate) struct AdapterTrace<T: Real> {
    pub proj: Tensor2D<T>,
    pub pre_act: Tensor2D<T>,
}

fn head_slice<T: Real>(m: &Tensor2D<T>, head: usize, dh: usize) -> Tensor2D<T> {
    let mut out = Tensor2D::zeros(m.rows, dh);
    for i in 0..m.rows {
        let src = &m.row(i)[head * dh..(head + 1) * dh];
        out.row_mut(i).copy_from_slice(src);
    }
    out
}

fn write_head<T: Real>(dst: &mut Tensor2D<T>, head: usize, dh: usize, src: &Tensor2D<T>) {
    for i in 0..dst.rows {
        let d = &mut dst.row_mut(i)[head * dh..(head + 1) * dh];
        d.copy_from_slice(src.row(i));
    }
}

fn add_head<T: Real>(dst: &mut Tensor2D<T>, head: usize, dh: usize, src: &Tensor2D<T>) {
    for i in 0..dst.rows {
        let d = &mut dst.row_mut(i)[head * dh..(head + 1) * dh];
        for (a, &b) in d.iter_mut().zip(src.row(i).iter()) {
            *a += b;
        }
    }
}

fn rope_all_rows<T: Real>(
    m: &mut Tensor2D<T>,
    heads: usize,
    dh: usize,
    pos: &[Position3D],
    text_like: &[bool],
    layout: &crate::rope3d::RopeLayout,
    invert: bool,
) -> Result<()> {
    for i in 0..m.rows {
        let row = m.row_mut(i);
        for h in 0..heads {
            let slice = &mut row[h * dh..(h + 1) * dh];
            if invert {
                apply_rope3d_inverse(slice, pos[i], layout, text_like[i])?;
            } else {
                apply_rope3d(slice, pos[i], layout, text_like[i])?;
            }
        }
    }
    Ok(())
}

fn add_bias_rows<T: Real>(m: &mut Tensor2D<T>, bias: &Tensor2D<T>) {
    for i in 0..m.rows {
        let row = m.row_mut(i);
        for (x, &b) in row.iter_mut().zip(bias.row(0).iter()) {
            *x += b;
        }
    }
}

/// Multi-head attention with separate query and key/value streams. The
/// mask is shared by all heads. Scores are scaled by 1/sqrt(head_dim)
/// before the masked softmax.
#[allow(clippy::too_many_arguments)]
fn attention<T: Real>(
    cfg: &ModelConfig,
    x_norm: Tensor2D<T>,
    q_src: &Tensor2D<T>,
    kv_src: &Tensor2D<T>,
    wq: &Tensor2D<T>,
    wk: &Tensor2D<T>,
    wv: &Tensor2D<T>,
    q_pos: &[Position3D],
    q_text_like: &[bool],
    kv_pos: &[Position3D],
    kv_text_like: &[bool],
    allowed: &BoolMat,
) -> Result<AttnTrace<T>> {
    let dh = cfg.head_dim;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut qr = gemm(q_src, wq)?;
    let mut kr = gemm(kv_src, wk)?;
    let v = gemm(kv_src, wv)?;
    rope_all_rows(&mut qr, cfg.heads, dh, q_pos, q_text_like, &cfg.rope, false)?;
    rope_all_rows(&mut kr, cfg.heads, dh, kv_pos, kv_text_like, &cfg.rope, false)?;
    let mut attn = Tensor2D::zeros(q_src.rows, cfg.model_dim);
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = head_slice(&qr, h, dh);
        let kh = head_slice(&kr, h, dh);
        let vh = head_slice(&v, h, dh);
        let mut scores = gemm(&qh, &kh.transpose())?;
        for s in &mut scores.data {
            *s *= scale;
        }
        let p = masked_softmax_rows(&scores, allowed)?;
        let oh = gemm(&p, &vh)?;
        write_head(&mut attn, h, dh, &oh);
        probs.push(p);
    }
    Ok(AttnTrace {
        x_norm,
        qr,
        kr,
        v,
        probs,
        attn,
    })
}

/// Backward of `attention`. Returns (d_q_src_norm, d_kv_src) given the
/// gradient of the concatenated head outputs.
#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    tr: &AttnTrace<T>,
    kv_src: &Tensor2D<T>,
    wq: crate::numkit::ParamId,
    wk: crate::numkit::ParamId,
    wv: crate::numkit::ParamId,
    q_pos: &[Position3D],
    q_text_like: &[bool],
    kv_pos: &[Position3D],
    kv_text_like: &[bool],
    d_attn: &Tensor2D<T>,
    grads: &mut Vec<(crate::numkit::ParamId, Tensor2D<T>)>,
) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
    let dh = cfg.head_dim;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut d_qr = Tensor2D::zeros(tr.qr.rows, cfg.model_dim);
    let mut d_kr = Tensor2D::zeros(tr.kr.rows, cfg.model_dim);
    let mut d_v = Tensor2D::zeros(tr.v.rows, cfg.model_dim);
    for h in 0..cfg.heads {
        let qh = head_slice(&tr.qr, h, dh);
        let kh = head_slice(&tr.kr, h, dh);
        let vh = head_slice(&tr.v, h, dh);
        let d_oh = head_slice(d_attn, h, dh);
        let p = &tr.probs[h];
        let d_p = gemm(&d_oh, &vh.transpose())?;
        let d_vh = gemm(&p.transpose(), &d_oh)?;
        let mut d_scores = softmax_backward_rows(p, &d_p);
        for s in &mut d_scores.data {
            *s *= scale;
        }
        let d_qh = gemm(&d_scores, &kh)?;
        let d_kh = gemm(&d_scores.transpose(), &qh)?;
        add_head(&mut d_qr, h, dh, &d_qh);
        add_head(&mut d_kr, h, dh, &d_kh);
        add_head(&mut d_v, h, dh, &d_vh);
    }
    // rotations are orthogonal: gradient through rope is the inverse rotation
    rope_all_rows(&mut d_qr, cfg.heads, dh, q_pos, q_text_like, &cfg.rope, true)?;
    rope_all_rows(&mut d_kr, cfg.heads, dh, kv_pos, kv_text_like, &cfg.rope, true)?;
    let (d_xq, d_wq) = gemm_backward(&d_qr, &tr.x_norm, store.value(wq))?;
    let (d_kv_k, d_wk) = gemm_backward(&d_kr, kv_src, store.value(wk))?;
    let (mut d_kv, d_wv) = gemm_backward(&d_v, kv_src, store.value(wv))?;
    d_kv.add_scaled(&d_kv_k, T::one());
    grads.push((wq, d_wq));
    grads.push((wk, d_wk));
    grads.push((wv, d_wv));
    Ok((d_xq, d_kv))
}

impl<T: Real> Model<T> {
    fn gate_scale_vec(&self, id: Option<crate::numkit::ParamId>) -> Vec<T> {
        self.gate_scale(id)
    }

    /// Run the V-FFN chain for one frame's adapter tokens, producing the
    /// per-cross-block visual stages (stage 0 is the adapter output). The
    /// chain never reads text state.
    pub fn frame_stage_chain(&self, tokens: &Tensor2D<T>) -> Result<Vec<Tensor2D<T>>> {
        let n = self.cfg.n_cross_blocks();
        let mut stages = Vec::with_capacity(n + 1);
        stages.push(tokens.clone());
        for c in 0..n {
            let next = self.vffn_update(stages.last().unwrap(), c)?;
            stages.push(next);
        }
        Ok(stages)
    }

    /// One V-FFN expert update: v + g_v ⊙ FFN(norm(v)). Identity when the
    /// configuration disables V-FFN experts.
    pub fn vffn_update(&self, stage: &Tensor2D<T>, block: usize) -> Result<Tensor2D<T>> {
        let cb = &self.ids.cross[block];
        if !self.cfg.use_vffn {
            return Ok(stage.clone());
        }
        let eps = T::from_f64(self.cfg.rms_eps);
        let vx = rms_norm(stage, self.store.value(cb.v_ln).row(0), eps)?;
        let (vf, _) = swiglu_forward(
            &vx,
            self.store.value(cb.vf_gate),
            self.store.value(cb.vf_up),
            self.store.value(cb.vf_down),
        )?;
        let gs = self.gate_scale_vec(cb.v_out_gate);
        let mut out = stage.clone();
        for i in 0..out.rows {
            let o = out.row_mut(i);
            let f = vf.row(i);
            for j in 0..o.len() {
                o[j] += gs[j] * f[j];
            }
        }
        Ok(out)
    }

    /// Standalone gated cross-attention: text queries over a visual stage.
    /// Rows with no allowed visual tokens pass through unchanged.
    pub fn cross_attention(
        &self,
        text_hidden: &Tensor2D<T>,
        visual_stage: &Tensor2D<T>,
        allowed: &BoolMat,
        block: usize,
        text_pos: &[Position3D],
        vis_pos: &[Position3D],
    ) -> Result<Tensor2D<T>> {
        if allowed.cols != visual_stage.rows {
            return Err(ModelError::MaskMismatch {
                mask_cols: allowed.cols,
                visual: visual_stage.rows,
            });
        }
        let cb = &self.ids.cross[block];
        let eps = T::from_f64(self.cfg.rms_eps);
        let xc = rms_norm(text_hidden, self.store.value(cb.ln).row(0), eps)?;
        let t_like = vec![true; text_hidden.rows];
        let v_like = vec![false; visual_stage.rows];
        let tr = attention(
            &self.cfg,
            xc.clone(),
            &xc,
            visual_stage,
            self.store.value(cb.wq),
            self.store.value(cb.wk),
            self.store.value(cb.wv),
            text_pos,
            &t_like,
            vis_pos,
            &v_like,
            allowed,
        )?;
        let z = gemm(&tr.attn, self.store.value(cb.wo))?;
        let gs = self.gate_scale_vec(cb.gate);
        let mut out = text_hidden.clone();
        for i in 0..out.rows {
            let o = out.row_mut(i);
            let zr = z.row(i);
            for j in 0..o.len() {
                o[j] += gs[j] * zr[j];
            }
        }
        Ok(out)
    }

    /// Full forward over a timed text stream and encoded frames. Masks are
    /// derived from timestamps: causal over text, time-aware over frames.
    pub fn forward(
        &self,
        text: &[TimedToken],
        frames: &[FrameTokens<T>],
    ) -> Result<Tensor2D<T>> {
        Ok(self.forward_mode(text, frames, CrossMode::Normal)?.logits)
    }

    pub fn text_only_forward(&self, text: &[TimedToken]) -> Result<Tensor2D<T>> {
        Ok(self.forward_mode(text, &[], CrossMode::Skip)?.logits)
    }

    pub fn forward_mode(
        &self,
        text: &[TimedToken],
        frames: &[FrameTokens<T>],
        mode: CrossMode,
    ) -> Result<ForwardOutput<T>> {
        let tokens = Tensor2D::concat_rows(&frames.iter().map(|f| &f.tokens).collect::<Vec<_>>());
        let vis_pos: Vec<Position3D> = frames.iter().flat_map(|f| f.positions.clone()).collect();
        let frame_times: Vec<f64> = frames.iter().map(|f| f.time).collect();
        forward_inner(
            &self.cfg,
            &self.ids,
            &self.store,
            text,
            &tokens,
            &vis_pos,
            &frame_times,
            None,
            mode,
            false,
        )
    }

    /// Training entry point: encodes raw frames (so adapter gradients flow),
    /// runs the forward with trace, computes masked mean cross-entropy, and
    /// accumulates gradients for every parameter.
    pub fn loss_and_grad(
        &mut self,
        text: &[TimedToken],
        frames: &[(Frame, f64)],
        targets: &[u32],
        loss_mask: &[bool],
    ) -> Result<LossOutput> {
        let (out, d_logits, n_pos, loss) = self.loss_forward(text, frames, targets, loss_mask)?;
        let trace = out.trace.expect("traced forward");
        let grads = backward_inner(&self.cfg, &self.ids, &self.store, &trace, &d_logits)?;
        for (id, g) in grads {
            self.store.accumulate_grad(id, &g);
        }
        Ok(LossOutput {
            loss,
            n_positions: n_pos,
        })
    }

    /// Loss value only (no gradients); used by the gradient checker.
    pub fn loss_value(
        &self,
        text: &[TimedToken],
        frames: &[(Frame, f64)],
        targets: &[u32],
        loss_mask: &[bool],
    ) -> Result<T> {
        eval_loss(
            &self.cfg,
            &self.ids,
            &self.frozen.vision_proj,
            &self.frozen.symbol_table,
            &self.store,
            text,
            frames,
            targets,
            loss_mask,
        )
    }

    fn loss_forward(
        &self,
        text: &[TimedToken],
        frames: &[(Frame, f64)],
        targets: &[u32],
        loss_mask: &[bool],
    ) -> Result<(ForwardOutput<T>, Tensor2D<T>, usize, f64)> {
        assert_eq!(text.len(), targets.len());
        assert_eq!(text.len(), loss_mask.len());
        let n_pos = loss_mask.iter().filter(|&&m| m).count();
        if n_pos == 0 {
            return Err(ModelError::DegenerateBatch);
        }
        let (raw, vis_pos, frame_times) = self.raw_visual_inputs(frames)?;
        let out = forward_inner(
            &self.cfg,
            &self.ids,
            &self.store,
            text,
            &raw,
            &vis_pos,
            &frame_times,
            Some(&self.frozen.vision_proj),
            CrossMode::Normal,
            true,
        )?;
        let (loss, d_logits) = cross_entropy(&out.logits, targets, loss_mask, n_pos);
        Ok((out, d_logits, n_pos, loss))
    }

    fn raw_visual_inputs(
        &self,
        frames: &[(Frame, f64)],
    ) -> Result<(Tensor2D<T>, Vec<Position3D>, Vec<f64>)> {
        let mut parts = Vec::new();
        let mut vis_pos = Vec::new();
        let mut times = Vec::new();
        for (f, t) in frames {
            parts.push(self.raw_patches(f)?);
            for r in 0..self.cfg.patch_grid.0 {
                for c in 0..self.cfg.patch_grid.1 {
                    vis_pos.push(crate::rope3d::visual_position(
                        *t,
                        self.cfg.time_scale,
                        r,
                        c,
                        self.cfg.patch_grid,
                    )?);
                }
            }
            times.push(*t);
        }
        let raw = Tensor2D::concat_rows(&parts.iter().collect::<Vec<_>>());
        Ok((raw, vis_pos, times))
    }

    /// Self-attention-only forward over visual tokens concatenated before
    /// the text stream: the concatenation baseline the efficiency benchmark
    /// compares against. Returns logits for the final row.
    pub fn concat_baseline_forward(
        &self,
        text: &[TimedToken],
        frames: &[FrameTokens<T>],
    ) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let store = &self.store;
        let eps = T::from_f64(cfg.rms_eps);
        let emb = store.value(self.ids.tok_emb);
        let mut rows = Tensor2D::zeros(0, cfg.model_dim);
        let mut pos = Vec::new();
        let mut text_like = Vec::new();
        for f in frames {
            for i in 0..f.tokens.rows {
                rows.push_row(f.tokens.row(i));
                pos.push(f.positions[i]);
                text_like.push(false);
            }
        }
        for t in text {
            rows.push_row(emb.row(t.id as usize));
            pos.push(text_position(t.time, cfg.time_scale)?);
            text_like.push(true);
        }
        let n = rows.rows;
        let causal = build_causal_mask(n);
        let mut h = rows;
        for l in &self.ids.layers {
            let x1 = rms_norm(&h, store.value(l.ln1).row(0), eps)?;
            let tr = attention(
                cfg,
                x1.clone(),
                &x1,
                &x1,
                store.value(l.wq),
                store.value(l.wk),
                store.value(l.wv),
                &pos,
                &text_like,
                &pos,
                &text_like,
                &causal,
            )?;
            let o = gemm(&tr.attn, store.value(l.wo))?;
            h.add_scaled(&o, T::one());
            let x2 = rms_norm(&h, store.value(l.ln2).row(0), eps)?;
            let (f, _) = swiglu_forward(
                &x2,
                store.value(l.ffn_gate),
                store.value(l.ffn_up),
                store.value(l.ffn_down),
            )?;
            h.add_scaled(&f, T::one());
        }
        let hf = rms_norm(&h, store.value(self.ids.final_ln).row(0), eps)?;
        let last = Tensor2D::from_vec(1, cfg.model_dim, hf.row(n - 1).to_vec());
        let logits = gemm(&last, store.value(self.ids.head))?;
        Ok(logits.data)
    }
}

fn cross_entropy<T: Real>(
    logits: &Tensor2D<T>,
    targets: &[u32],
    loss_mask: &[bool],
    n_pos: usize,
) -> (f64, Tensor2D<T>) {
    let mut loss = 0.0;
    let mut d = Tensor2D::zeros(logits.rows, logits.cols);
    let inv_n = 1.0 / n_pos as f64;
    for i in 0..logits.rows {
        if !loss_mask[i] {
            continue;
        }
        let row = logits.row(i);
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut z = T::zero();
        for &v in row {
            z += (v - max).exp();
        }
        let target = targets[i] as usize;
        let logp = (row[target] - max).to_f64_lossy() - z.to_f64_lossy().ln();
        loss -= logp * inv_n;
        let dr = d.row_mut(i);
        for (j, dv) in dr.iter_mut().enumerate() {
            let p = ((row[j] - max).exp() / z).to_f64_lossy();
            let y = if j == target { 1.0 } else { 0.0 };
            *dv = T::from_f64((p - y) * inv_n);
        }
    }
    (loss, d)
}

/// Loss as a pure function of a parameter store, for finite differencing.
#[allow(clippy::too_many_arguments)]
pub fn eval_loss<T: Real>(
    cfg: &ModelConfig,
    ids: &ModelIds,
    vision_proj: &Tensor2D<T>,
    symbol_table: &Tensor2D<T>,
    store: &ParamStore<T>,
    text: &[TimedToken],
    frames: &[(Frame, f64)],
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<T> {
    let n_pos = loss_mask.iter().filter(|&&m| m).count();
    if n_pos == 0 {
        return Err(ModelError::DegenerateBatch);
    }
    // re-create raw inputs without the Model wrapper
    let tpf = cfg.tokens_per_frame;
    let mut parts: Vec<Tensor2D<T>> = Vec::new();
    let mut vis_pos = Vec::new();
    let mut times = Vec::new();
    for (f, t) in frames {
        let raw = match f {
            Frame::Symbolic(id) => {
                let row = symbol_table.row(*id as usize);
                let mut data = Vec::with_capacity(tpf * cfg.patch_input_dim);
                for _ in 0..tpf {
                    data.extend_from_slice(row);
                }
                Tensor2D::from_vec(tpf, cfg.patch_input_dim, data)
            }
            Frame::Pixels(px) => Tensor2D::from_vec(
                tpf,
                cfg.patch_input_dim,
                px.iter().map(|&x| T::from_f64(x)).collect(),
            ),
        };
        parts.push(raw);
        for r in 0..cfg.patch_grid.0 {
            for c in 0..cfg.patch_grid.1 {
                vis_pos.push(crate::rope3d::visual_position(
                    *t,
                    cfg.time_scale,
                    r,
                    c,
                    cfg.patch_grid,
                )?);
            }
        }
        times.push(*t);
    }
    let raw = Tensor2D::concat_rows(&parts.iter().collect::<Vec<_>>());
    let out = forward_inner(
        cfg,
        ids,
        store,
        text,
        &raw,
        &vis_pos,
        &times,
        Some(vision_proj),
        CrossMode::Normal,
        false,
    )?;
    let (loss, _) = cross_entropy(&out.logits, targets, loss_mask, n_pos);
    Ok(T::from_f64(loss))
}

/// Core forward. When `vision_proj` is given, `visual` holds raw patches to
/// run through the frozen projection and adapter; otherwise it holds
/// already-encoded frame tokens.
#[allow(clippy::too_many_arguments)]
fn forward_inner<T: Real>(
    cfg: &ModelConfig,
    ids: &ModelIds,
    store: &ParamStore<T>,
    text: &[TimedToken],
    visual: &Tensor2D<T>,
    vis_pos: &[Position3D],
    frame_times: &[f64],
    vision_proj: Option<&Tensor2D<T>>,
    mode: CrossMode,
    want_trace: bool,
) -> Result<ForwardOutput<T>> {
    let eps = T::from_f64(cfg.rms_eps);
    let tn = text.len();
    let emb = store.value(ids.tok_emb);
    let mut h = Tensor2D::zeros(tn, cfg.model_dim);
    for (i, t) in text.iter().enumerate() {
        h.row_mut(i).copy_from_slice(emb.row(t.id as usize));
    }
    let text_pos: Vec<Position3D> = text
        .iter()
        .map(|t| text_position(t.time, cfg.time_scale))
        .collect::<std::result::Result<_, _>>()?;
    let text_times: Vec<f64> = text.iter().map(|t| t.time).collect();
    let causal = build_causal_mask(tn);
    let stream = build_stream_mask(&text_times, frame_times);
    let allowed_v = expand_frame_mask(&stream, cfg.tokens_per_frame);

    // visual stage 0: adapter output (from raw patches) or encoded tokens
    let (stage0, adapter_trace) = match vision_proj {
        Some(proj) => {
            let projn = gemm(visual, proj)?;
            let mut a = gemm(&projn, store.value(ids.adapter_w1))?;
            add_bias_rows(&mut a, store.value(ids.adapter_b1));
            let act = a.map(silu);
            let mut out = gemm(&act, store.value(ids.adapter_w2))?;
            add_bias_rows(&mut out, store.value(ids.adapter_b2));
            (
                out,
                Some(AdapterTrace {
                    proj: projn,
                    pre_act: a,
                }),
            )
        }
        None => (visual.clone(), None),
    };

    // an empty visual set is fully masked everywhere, so the cross blocks
    // would contribute exact zeros; skip them
    let n_cross = if mode == CrossMode::Skip || stage0.rows == 0 {
        0
    } else {
        cfg.n_cross_blocks()
    };
    let mut stages = vec![stage0];
    let mut layer_traces = Vec::new();
    let mut cross_traces = Vec::new();
    let t_like = vec![true; tn];
    let v_like = vec![false; vis_pos.len()];
    let mut cross_idx = 0usize;

    for (l_idx, l) in ids.layers.iter().enumerate() {
        let h_in = h.clone();
        let x1 = rms_norm(&h, store.value(l.ln1).row(0), eps)?;
        let sa = attention(
            cfg,
            x1.clone(),
            &x1,
            &x1,
            store.value(l.wq),
            store.value(l.wk),
            store.value(l.wv),
            &text_pos,
            &t_like,
            &text_pos,
            &t_like,
            &causal,
        )?;
        let o = gemm(&sa.attn, store.value(l.wo))?;
        h.add_scaled(&o, T::one());
        let h_mid = h.clone();
        let x2 = rms_norm(&h, store.value(l.ln2).row(0), eps)?;
        let (f, ffn_tr) = swiglu_forward(
            &x2,
            store.value(l.ffn_gate),
            store.value(l.ffn_up),
            store.value(l.ffn_down),
        )?;
        h.add_scaled(&f, T::one());
        if want_trace {
            layer_traces.push(LayerTrace {
                h_in,
                sa,
                h_mid,
                x2,
                ffn: ffn_tr,
            });
        }

        if cross_idx < n_cross && (l_idx + 1) % cfg.cross_every == 0 {
            let cb = &ids.cross[cross_idx];
            let c_h_in = h.clone();
            let xc = rms_norm(&h, store.value(cb.ln).row(0), eps)?;
            let stage = stages.last().unwrap().clone();
            let ca = attention(
                cfg,
                xc.clone(),
                &xc,
                &stage,
                store.value(cb.wq),
                store.value(cb.wk),
                store.value(cb.wv),
                &text_pos,
                &t_like,
                vis_pos,
                &v_like,
                &allowed_v,
            )?;
            let z = gemm(&ca.attn, store.value(cb.wo))?;
            let gs = gate_scale_of(cfg, store, cb.gate);
            for i in 0..tn {
                let hr = h.row_mut(i);
                let zr = z.row(i);
                for j in 0..hr.len() {
                    hr[j] += gs[j] * zr[j];
                }
            }
            // V-FFN expert: update the visual stream for the next block
            let (next_stage, vx, vtr, vf_out) = if cfg.use_vffn {
                let vx = rms_norm(&stage, store.value(cb.v_ln).row(0), eps)?;
                let (vf, vtr) = swiglu_forward(
                    &vx,
                    store.value(cb.vf_gate),
                    store.value(cb.vf_up),
                    store.value(cb.vf_down),
                )?;
                let gv = gate_scale_of(cfg, store, cb.v_out_gate);
                let mut next = stage.clone();
                for i in 0..next.rows {
                    let nr = next.row_mut(i);
                    let fr = vf.row(i);
                    for j in 0..nr.len() {
                        nr[j] += gv[j] * fr[j];
                    }
                }
                (next, Some(vx), Some(vtr), Some(vf))
            } else {
                (stage.clone(), None, None, None)
            };
            stages.push(next_stage);
            if want_trace {
                cross_traces.push(CrossTrace {
                    h_in: c_h_in,
                    attn: ca,
                    z,
                    vx,
                    vffn: vtr,
                    vf_out,
                });
            }
            cross_idx += 1;
        }
    }

    let h_final = h.clone();
    let hf = rms_norm(&h, store.value(ids.final_ln).row(0), eps)?;
    let logits = gemm(&hf, store.value(ids.head))?;
    let trace = if want_trace {
        Some(Trace {
            text_ids: text.iter().map(|t| t.id).collect(),
            text_pos,
            vis_pos: vis_pos.to_vec(),
            adapter: adapter_trace,
            stages,
            layers: layer_traces,
            cross: cross_traces,
            h_final,
            hf,
        })
    } else {
        None
    };
    Ok(ForwardOutput { logits, trace })
}

fn gate_scale_of<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    id: Option<crate::numkit::ParamId>,
) -> Vec<T> {
    match id {
        None => vec![T::one(); cfg.model_dim],
        Some(id) => {
            let g = store.value(id);
            match cfg.gate_kind {
                GateKind::Tanh => g.row(0).iter().map(|&x| x.tanh()).collect(),
                _ => g.row(0).to_vec(),
            }
        }
    }
}

/// Hand-derived backward over a traced forward. Returns (param id, grad)
/// pairs; shared projections show up once per use site and accumulate.
fn backward_inner<T: Real>(
    cfg: &ModelConfig,
    ids: &ModelIds,
    store: &ParamStore<T>,
    trace: &Trace<T>,
    d_logits: &Tensor2D<T>,
) -> Result<Vec<(crate::numkit::ParamId, Tensor2D<T>)>> {
    let eps = T::from_f64(cfg.rms_eps);
    let mut grads: Vec<(crate::numkit::ParamId, Tensor2D<T>)> = Vec::new();
    let tn = trace.text_pos.len();
    let t_like = vec![true; tn];
    let v_like = vec![false; trace.vis_pos.len()];

    // head and final norm
    let (d_hf, d_head) = gemm_backward(d_logits, &trace.hf, store.value(ids.head))?;
    grads.push((ids.head, d_head));
    let (mut d_h, d_fg) = rms_norm_backward(
        &trace.h_final,
        store.value(ids.final_ln).row(0),
        eps,
        &d_hf,
    );
    grads.push((ids.final_ln, Tensor2D::from_vec(1, d_fg.len(), d_fg)));

    let n_cross = trace.cross.len();
    // gradient wrt each visual stage, filled in reverse
    let mut d_stages: Vec<Option<Tensor2D<T>>> = vec![None; trace.stages.len()];
    let mut cross_idx = n_cross;

    for (l_idx, l) in ids.layers.iter().enumerate().rev() {
        // cross block hosted after this layer runs last in forward order
        if cross_idx > 0 && (l_idx + 1) % cfg.cross_every == 0 && (l_idx + 1) / cfg.cross_every <= n_cross {
            cross_idx -= 1;
            let cb = &ids.cross[cross_idx];
            let ct = &trace.cross[cross_idx];
            let stage = &trace.stages[cross_idx];

            // V-FFN backward: stage[c+1] = stage[c] + g_v ⊙ FFN(norm(stage[c]))
            let mut d_stage = match d_stages[cross_idx + 1].take() {
                Some(d) => d,
                None => Tensor2D::zeros(stage.rows, stage.cols),
            };
            if cfg.use_vffn {
                let d_next = d_stage.clone();
                let gv = gate_scale_of(cfg, store, cb.v_out_gate);
                let vf_out = ct.vf_out.as_ref().unwrap();
                let mut d_vf = Tensor2D::zeros(vf_out.rows, vf_out.cols);
                let mut d_gv = vec![T::zero(); cfg.model_dim];
                for i in 0..d_next.rows {
                    let dn = d_next.row(i);
                    let fo = vf_out.row(i);
                    let dv = d_vf.row_mut(i);
                    for j in 0..cfg.model_dim {
                        dv[j] = dn[j] * gv[j];
                        d_gv[j] += dn[j] * fo[j];
                    }
                }
                if let Some(gid) = cb.v_out_gate {
                    push_gate_grad(cfg, store, gid, d_gv, &mut grads);
                }
                let vx = ct.vx.as_ref().unwrap();
                let sg = swiglu_backward(
                    vx,
                    store.value(cb.vf_gate),
                    store.value(cb.vf_up),
                    store.value(cb.vf_down),
                    ct.vffn.as_ref().unwrap(),
                    &d_vf,
                )?;
                grads.push((cb.vf_gate, sg.dw_gate));
                grads.push((cb.vf_up, sg.dw_up));
                grads.push((cb.vf_down, sg.dw_down));
                let (d_s, d_vln) =
                    rms_norm_backward(stage, store.value(cb.v_ln).row(0), eps, &sg.dx);
                grads.push((cb.v_ln, Tensor2D::from_vec(1, d_vln.len(), d_vln)));
                d_stage.add_scaled(&d_s, T::one());
            }

            // cross-attention backward: h_out = h_in + g ⊙ (attn·wo)
            let gs = gate_scale_of(cfg, store, cb.gate);
            let mut d_z = Tensor2D::zeros(tn, cfg.model_dim);
            let mut d_g = vec![T::zero(); cfg.model_dim];
            for i in 0..tn {
                let dh = d_h.row(i);
                let zr = ct.z.row(i);
                let dz = d_z.row_mut(i);
                for j in 0..cfg.model_dim {
                    dz[j] = dh[j] * gs[j];
                    d_g[j] += dh[j] * zr[j];
                }
            }
            if let Some(gid) = cb.gate {
                push_gate_grad(cfg, store, gid, d_g, &mut grads);
            }
            let (d_attn, d_wo) = gemm_backward(&d_z, &ct.attn.attn, store.value(cb.wo))?;
            grads.push((cb.wo, d_wo));
            let (d_xc, d_s) = attention_backward(
                cfg,
                store,
                &ct.attn,
                stage,
                cb.wq,
                cb.wk,
                cb.wv,
                &trace.text_pos,
                &t_like,
                &trace.vis_pos,
                &v_like,
                &d_attn,
                &mut grads,
            )?;
            d_stage.add_scaled(&d_s, T::one());
            let (d_hin, d_ln) = rms_norm_backward(&ct.h_in, store.value(cb.ln).row(0), eps, &d_xc);
            grads.push((cb.ln, Tensor2D::from_vec(1, d_ln.len(), d_ln)));
            d_h.add_scaled(&d_hin, T::one());
            d_stages[cross_idx] = Some(match d_stages[cross_idx].take() {
                Some(mut d) => {
                    d.add_scaled(&d_stage, T::one());
                    d
                }
                None => d_stage,
            });
        }

        let lt = &trace.layers[l_idx];
        // FFN backward
        let sg = swiglu_backward(
            &lt.x2,
            store.value(l.ffn_gate),
            store.value(l.ffn_up),
            store.value(l.ffn_down),
            &lt.ffn,
            &d_h,
        )?;
        grads.push((l.ffn_gate, sg.dw_gate));
        grads.push((l.ffn_up, sg.dw_up));
        grads.push((l.ffn_down, sg.dw_down));
        let (d_hmid, d_ln2) = rms_norm_backward(&lt.h_mid, store.value(l.ln2).row(0), eps, &sg.dx);
        grads.push((l.ln2, Tensor2D::from_vec(1, d_ln2.len(), d_ln2)));
        d_h.add_scaled(&d_hmid, T::one());

        // self-attention backward
        let (d_attn, d_wo) = gemm_backward(&d_h, &lt.sa.attn, store.value(l.wo))?;
        grads.push((l.wo, d_wo));
        let (d_x1_q, d_x1_kv) = attention_backward(
            cfg,
            store,
            &lt.sa,
            &lt.sa.x_norm,
            l.wq,
            l.wk,
            l.wv,
            &trace.text_pos,
            &t_like,
            &trace.text_pos,
            &t_like,
            &d_attn,
            &mut grads,
        )?;
        let mut d_x1 = d_x1_q;
        d_x1.add_scaled(&d_x1_kv, T::one());
        let (d_hin, d_ln1) = rms_norm_backward(&lt.h_in, store.value(l.ln1).row(0), eps, &d_x1);
        grads.push((l.ln1, Tensor2D::from_vec(1, d_ln1.len(), d_ln1)));
        d_h.add_scaled(&d_hin, T::one());
    }

    // token embedding scatter
    let mut d_emb = Tensor2D::zeros(cfg.vocab, cfg.model_dim);
    for (i, &id) in trace.text_ids.iter().enumerate() {
        let src = d_h.row(i);
        let dst = d_emb.row_mut(id as usize);
        for (a, &b) in dst.iter_mut().zip(src.iter()) {
            *a += b;
        }
    }
    grads.push((ids.tok_emb, d_emb));

    // adapter backward from the stage-0 gradient
    if let (Some(ad), Some(d_stage0)) = (&trace.adapter, d_stages[0].take()) {
        let act = ad.pre_act.map(silu);
        let (d_act, d_w2) = gemm_backward(&d_stage0, &act, store.value(ids.adapter_w2))?;
        grads.push((ids.adapter_w2, d_w2));
        grads.push((ids.adapter_b2, d_stage0.col_sum()));
        let mut d_pre = Tensor2D::zeros(d_act.rows, d_act.cols);
        for i in 0..d_act.data.len() {
            d_pre.data[i] = d_act.data[i] * silu_prime(ad.pre_act.data[i]);
        }
        let (_, d_w1) = gemm_backward(&d_pre, &ad.proj, store.value(ids.adapter_w1))?;
        grads.push((ids.adapter_w1, d_w1));
        grads.push((ids.adapter_b1, d_pre.col_sum()));
    }

    Ok(grads)
}

fn push_gate_grad<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    gid: crate::numkit::ParamId,
    d_scale: Vec<T>,
    grads: &mut Vec<(crate::numkit::ParamId, Tensor2D<T>)>,
) {
    let d = match cfg.gate_kind {
        GateKind::Tanh => {
            let g = store.value(gid);
            d_scale
                .iter()
                .zip(g.row(0).iter())
                .map(|(&d, &gv)| {
                    let t = gv.tanh();
                    d * (T::one() - t * t)
                })
                .collect()
        }
        _ => d_scale,
    };
    let n = d.len();
    grads.push((gid, Tensor2D::from_vec(1, n, d)));
}

/// Per-frame visual stages plus identity, cached by the streaming decoder.
#[derive(Debug, Clone)]
pub struct CachedFrameStages<T: Real> {
    pub frame_id: u64,
    pub time: f64,
    pub stages: Vec<Tensor2D<T>>,
    pub positions: Vec<Position3D>,
}

pub(crate) struct CrossKv<T: Real> {
    pub signature: Vec<u64>,
    pub kr: Tensor2D<T>,
    pub v: Tensor2D<T>,
}

/// Incremental decode state: per-layer self-attention K/V caches over all
/// processed text tokens, plus per-cross-block visual K/V reused while the
/// visible frame set is unchanged.
pub struct IncrementalState<T: Real> {
    k_cache: Vec<Tensor2D<T>>,
    v_cache: Vec<Tensor2D<T>>,
    cross_kv: Vec<Option<Rc<CrossKv<T>>>>,
    pub processed: Vec<TimedToken>,
    /// Number of cross K/V rebuilds, observable as a cache-hit probe.
    pub cross_kv_rebuilds: usize,
}

impl<T: Real> IncrementalState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            k_cache: vec![Tensor2D::zeros(0, cfg.model_dim); cfg.layers],
            v_cache: vec![Tensor2D::zeros(0, cfg.model_dim); cfg.layers],
            cross_kv: vec![None; cfg.n_cross_blocks()],
            processed: Vec::new(),
            cross_kv_rebuilds: 0,
        }
    }

    #[allow(dead_code)]
    pub(crate) fn cross_kv_handles(&self) -> Vec<Option<Rc<CrossKv<T>>>> {
        self.cross_kv.clone()
    }
}

impl<T: Real> Model<T> {
    /// Encode one frame and run its V-FFN stage chain; the result is
    /// memoizable because it never depends on text state.
    pub fn cache_frame(&self, frame: &Frame, t: f64, frame_id: u64) -> Result<CachedFrameStages<T>> {
        let ft = self.encode_frame(frame, t)?;
        let stages = self.frame_stage_chain(&ft.tokens)?;
        Ok(CachedFrameStages {
            frame_id,
            time: t,
            stages,
            positions: ft.positions,
        })
    }

    /// Process one text token incrementally. `visible` are the cached frames
    /// the token may attend (caller guarantees frame.time <= token.time; a
    /// time-aware mask is applied again as a belt check). Returns the logits
    /// row for this position.
    pub fn incr_step(
        &self,
        st: &mut IncrementalState<T>,
        tok: TimedToken,
        visible: &[&CachedFrameStages<T>],
        mode: CrossMode,
    ) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let store = &self.store;
        let eps = T::from_f64(cfg.rms_eps);
        let dh = cfg.head_dim;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let pos = text_position(tok.time, cfg.time_scale)?;
        let emb = store.value(self.ids.tok_emb);
        let mut h = Tensor2D::from_vec(1, cfg.model_dim, emb.row(tok.id as usize).to_vec());

        let n_cross = if mode == CrossMode::Skip || visible.is_empty() {
            0
        } else {
            cfg.n_cross_blocks()
        };
        let mut cross_idx = 0usize;
        let sig: Vec<u64> = visible.iter().map(|f| f.frame_id).collect();
        let vis_times: Vec<f64> = visible.iter().map(|f| f.time).collect();
        let tpf = cfg.tokens_per_frame;

        for (l_idx, l) in self.ids.layers.iter().enumerate() {
            let x1 = rms_norm(&h, store.value(l.ln1).row(0), eps)?;
            let mut q = gemm(&x1, store.value(l.wq))?;
            let mut k = gemm(&x1, store.value(l.wk))?;
            let v = gemm(&x1, store.value(l.wv))?;
            for hh in 0..cfg.heads {
                apply_rope3d(&mut q.row_mut(0)[hh * dh..(hh + 1) * dh], pos, &cfg.rope, true)?;
                apply_rope3d(&mut k.row_mut(0)[hh * dh..(hh + 1) * dh], pos, &cfg.rope, true)?;
            }
            st.k_cache[l_idx].push_row(k.row(0));
            st.v_cache[l_idx].push_row(v.row(0));
            let n_keys = st.k_cache[l_idx].rows;
            let mut attn = Tensor2D::zeros(1, cfg.model_dim);
            let all = BoolMat::new(1, n_keys, true);
            for hh in 0..cfg.heads {
                let qh = head_slice(&q, hh, dh);
                let kh = head_slice(&st.k_cache[l_idx], hh, dh);
                let vh = head_slice(&st.v_cache[l_idx], hh, dh);
                let mut scores = gemm(&qh, &kh.transpose())?;
                for s in &mut scores.data {
                    *s *= scale;
                }
                let p = masked_softmax_rows(&scores, &all)?;
                let oh = gemm(&p, &vh)?;
                write_head(&mut attn, hh, dh, &oh);
            }
            let o = gemm(&attn, store.value(l.wo))?;
            h.add_scaled(&o, T::one());
            let x2 = rms_norm(&h, store.value(l.ln2).row(0), eps)?;
            let (f, _) = swiglu_forward(
                &x2,
                store.value(l.ffn_gate),
                store.value(l.ffn_up),
                store.value(l.ffn_down),
            )?;
            h.add_scaled(&f, T::one());

            if cross_idx < n_cross && (l_idx + 1) % cfg.cross_every == 0 {
                let cb = &self.ids.cross[cross_idx];
                let xc = rms_norm(&h, store.value(cb.ln).row(0), eps)?;
                let mut qc = gemm(&xc, store.value(cb.wq))?;
                for hh in 0..cfg.heads {
                    apply_rope3d(&mut qc.row_mut(0)[hh * dh..(hh + 1) * dh], pos, &cfg.rope, true)?;
                }
                // reuse visual K/V while the visible frame set is unchanged
                let hit = st.cross_kv[cross_idx]
                    .as_ref()
                    .map(|kv| kv.signature == sig)
                    .unwrap_or(false);
                if !hit {
                    let stage_rows: Vec<&Tensor2D<T>> =
                        visible.iter().map(|f| &f.stages[cross_idx]).collect();
                    let stage = Tensor2D::concat_rows(&stage_rows);
                    let mut kc = gemm(&stage, store.value(cb.wk))?;
                    let vc = gemm(&stage, store.value(cb.wv))?;
                    for (row_i, p) in visible
                        .iter()
                        .flat_map(|f| f.positions.iter())
                        .enumerate()
                    {
                        for hh in 0..cfg.heads {
                            apply_rope3d(
                                &mut kc.row_mut(row_i)[hh * dh..(hh + 1) * dh],
                                *p,
                                &cfg.rope,
                                false,
                            )?;
                        }
                    }
                    st.cross_kv[cross_idx] = Some(Rc::new(CrossKv {
                        signature: sig.clone(),
                        kr: kc,
                        v: vc,
                    }));
                    st.cross_kv_rebuilds += 1;
                }
                let kv = st.cross_kv[cross_idx].as_ref().unwrap().clone();
                let stream = build_stream_mask(&[tok.time], &vis_times);
                let allowed = expand_frame_mask(&stream, tpf);
                let mut attn_c = Tensor2D::zeros(1, cfg.model_dim);
                for hh in 0..cfg.heads {
                    let qh = head_slice(&qc, hh, dh);
                    let kh = head_slice(&kv.kr, hh, dh);
                    let vh = head_slice(&kv.v, hh, dh);
                    let mut scores = gemm(&qh, &kh.transpose())?;
                    for s in &mut scores.data {
                        *s *= scale;
                    }
                    let p = masked_softmax_rows(&scores, &allowed)?;
                    let oh = gemm(&p, &vh)?;
                    write_head(&mut attn_c, hh, dh, &oh);
                }
                let z = gemm(&attn_c, store.value(cb.wo))?;
                let gs = self.gate_scale(cb.gate);
                let hr = h.row_mut(0);
                let zr = z.row(0);
                for j in 0..hr.len() {
                    hr[j] += gs[j] * zr[j];
                }
                cross_idx += 1;
            }
        }
        let hf = rms_norm(&h, store.value(self.ids.final_ln).row(0), eps)?;
        let logits = gemm(&hf, store.value(self.ids.head))?;
        st.processed.push(tok);
        Ok(logits.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;

    fn tiny_model(seed: u64) -> Model<f64> {
        Model::init(ModelConfig::tiny(24), seed).unwrap()
    }

    fn sample_frames() -> Vec<(Frame, f64)> {
        vec![
            (Frame::Symbolic(3), 0.0),
            (Frame::Symbolic(7), 1.0),
            (Frame::Symbolic(1), 2.0),
        ]
    }

    fn sample_text() -> Vec<TimedToken> {
        (0..6)
            .map(|i| TimedToken {
                id: (i * 3 % 24) as u32,
                time: i as f64 * 0.5,
            })
            .collect()
    }

    #[test]
    fn loss_decreases_under_adam() {
        let mut m = tiny_model(11);
        let text = sample_text();
        let frames = sample_frames();
        let targets: Vec<u32> = (0..6).map(|i| (i * 5 % 24) as u32).collect();
        let mask = vec![true; 6];
        let mut opt = crate::numkit::Adam::new(&m.store, 1e-2);
        let first = m.loss_and_grad(&text, &frames, &targets, &mask).unwrap().loss;
        opt.step(&mut m.store, &[]);
        m.store.zero_grads();
        for _ in 0..20 {
            m.loss_and_grad(&text, &frames, &targets, &mask).unwrap();
            opt.step(&mut m.store, &[]);
            m.store.zero_grads();
        }
        let last = m.loss_and_grad(&text, &frames, &targets, &mask).unwrap().loss;
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut m = tiny_model(3);
        let text = sample_text();
        let frames = sample_frames();
        let targets: Vec<u32> = (0..6).map(|i| (i * 7 % 24) as u32).collect();
        let mask = vec![false, true, true, true, true, true];
        m.store.zero_grads();
        m.loss_and_grad(&text, &frames, &targets, &mask).unwrap();
        let cfg = m.cfg.clone();
        let ids = m.ids.clone();
        let vp = m.frozen.vision_proj.clone();
        let st = m.frozen.symbol_table.clone();
        let all = m.all_param_ids();
        let report = grad_check(
            &mut m.store,
            &all,
            |store| {
                eval_loss(&cfg, &ids, &vp, &st, store, &text, &frames, &targets, &mask)
                    .map_err(|e| crate::numkit::NumError::NonFinite {
                        what: e.to_string(),
                    })
            },
            1e-5,
            Some(3),
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn zeroed_gates_match_text_only_decoder_exactly() {
        let mut m = tiny_model(5);
        m.zero_gates();
        let text = sample_text();
        let frames: Vec<FrameTokens<f64>> = sample_frames()
            .iter()
            .map(|(f, t)| m.encode_frame(f, *t).unwrap())
            .collect();
        let with = m.forward(&text, &frames).unwrap();
        let without = m.text_only_forward(&text).unwrap();
        assert_eq!(with.data, without.data);
    }

    #[test]
    fn incremental_steps_match_batch_forward_bitwise() {
        let m = tiny_model(9);
        let frames = sample_frames();
        let cached: Vec<CachedFrameStages<f64>> = frames
            .iter()
            .enumerate()
            .map(|(i, (f, t))| m.cache_frame(f, *t, i as u64).unwrap())
            .collect();
        let encoded: Vec<FrameTokens<f64>> = frames
            .iter()
            .map(|(f, t)| m.encode_frame(f, *t).unwrap())
            .collect();
        let text = sample_text();
        let batch = m.forward(&text, &encoded).unwrap();
        let mut st = IncrementalState::new(&m.cfg);
        for (i, tok) in text.iter().enumerate() {
            let visible: Vec<&CachedFrameStages<f64>> = cached
                .iter()
                .filter(|c| c.time <= tok.time)
                .collect();
            let row = m.incr_step(&mut st, *tok, &visible, CrossMode::Normal).unwrap();
            assert_eq!(row, batch.row(i).to_vec(), "row {i}");
        }
    }

    #[test]
    fn cross_kv_cache_reused_while_frame_set_unchanged() {
        let m = tiny_model(13);
        let cached: Vec<CachedFrameStages<f64>> = sample_frames()
            .iter()
            .enumerate()
            .map(|(i, (f, t))| m.cache_frame(f, *t, i as u64).unwrap())
            .collect();
        let mut st = IncrementalState::new(&m.cfg);
        let all: Vec<&CachedFrameStages<f64>> = cached.iter().collect();
        for i in 0..4 {
            let tok = TimedToken { id: i, time: 5.0 + i as f64 };
            m.incr_step(&mut st, tok, &all, CrossMode::Normal).unwrap();
        }
        assert_eq!(st.cross_kv_rebuilds, m.cfg.n_cross_blocks());
        let h1 = st.cross_kv_handles();
        let tok = TimedToken { id: 9, time: 10.0 };
        m.incr_step(&mut st, tok, &all, CrossMode::Normal).unwrap();
        let h2 = st.cross_kv_handles();
        for (a, b) in h1.iter().zip(h2.iter()) {
            assert!(Rc::ptr_eq(a.as_ref().unwrap(), b.as_ref().unwrap()));
        }
    }

    #[test]
    fn vffn_chain_matches_forward_stages() {
        let m = tiny_model(17);
        let ft = m.encode_frame(&Frame::Symbolic(2), 0.0).unwrap();
        let stages = m.frame_stage_chain(&ft.tokens).unwrap();
        assert_eq!(stages.len(), m.cfg.n_cross_blocks() + 1);
        let again = m.vffn_update(&stages[0], 0).unwrap();
        assert_eq!(again.data, stages[1].data);
    }

    #[test]
    fn degenerate_batch_rejected() {
        let mut m = tiny_model(1);
        let text = sample_text();
        let err = m
            .loss_and_grad(&text, &sample_frames(), &[0; 6], &[false; 6])
            .unwrap_err();
        assert!(matches!(err, ModelError::DegenerateBatch));
    }
}
