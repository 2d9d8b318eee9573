//! Parallel 3D rotary position embedding.
//!
//! The head dimension is split into three rotary components for (temporal,
//! height, width). Text tokens carry the same coordinate on all three
//! components, so a pure-text sequence reduces to standard 1D RoPE per slice.
//! A visual token and a text token at the same timestamp share the exact
//! temporal rotation — positions are never offset by stream interleaving.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::Real;

#[derive(Debug, Error)]
pub enum RopeError {
    #[error("head_dim {0} must be even and at least 6")]
    BadHeadDim(usize),
    #[error("negative timestamp {0}")]
    NegativeTimestamp(f64),
    #[error("time_scale must be positive, got {0}")]
    BadTimeScale(f64),
    #[error("patch ({row}, {col}) outside grid {rows}x{cols}")]
    OutOfGrid {
        row: i64,
        col: i64,
        rows: usize,
        cols: usize,
    },
    #[error("vector length {vec_len} does not match layout head_dim {head_dim}")]
    LengthMismatch { vec_len: usize, head_dim: usize },
    #[error("invalid layout: d_t={d_t} d_h={d_h} d_w={d_w} for head_dim {head_dim}")]
    BadLayout {
        d_t: usize,
        d_h: usize,
        d_w: usize,
        head_dim: usize,
    },
}

/// Rotary coordinates of one token: temporal (scaled seconds, continuous),
/// patch row, patch column. Text tokens mirror the temporal coordinate on
/// all three components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position3D {
    pub t: f64,
    pub h: i64,
    pub w: i64,
}

impl Position3D {
    pub fn delta(self, other: Self) -> Self {
        Self {
            t: self.t - other.t,
            h: self.h - other.h,
            w: self.w - other.w,
        }
    }
}

/// Per-component rotary widths plus frequency base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeLayout {
    pub head_dim: usize,
    pub d_t: usize,
    pub d_h: usize,
    pub d_w: usize,
    pub theta: f64,
}

impl RopeLayout {
    /// Build a layout from a head dimension with the default theta = 10000.
    pub fn new(head_dim: usize) -> Result<Self, RopeError> {
        Self::with_theta(head_dim, 10000.0)
    }

    pub fn with_theta(head_dim: usize, theta: f64) -> Result<Self, RopeError> {
        let (d_t, d_h, d_w) = split_dims(head_dim)?;
        Ok(Self {
            head_dim,
            d_t,
            d_h,
            d_w,
            theta,
        })
    }

    pub fn validate(&self) -> Result<(), RopeError> {
        let ok = self.d_t + self.d_h + self.d_w == self.head_dim
            && self.d_t % 2 == 0
            && self.d_h % 2 == 0
            && self.d_w % 2 == 0
            && self.theta > 1.0;
        if ok {
            Ok(())
        } else {
            Err(RopeError::BadLayout {
                d_t: self.d_t,
                d_h: self.d_h,
                d_w: self.d_w,
                head_dim: self.head_dim,
            })
        }
    }
}

/// Split a head dimension into three even component widths. The remainder
/// beyond an even three-way split goes to the temporal component.
pub fn split_dims(head_dim: usize) -> Result<(usize, usize, usize), RopeError> {
    if head_dim % 2 != 0 || head_dim < 6 {
        return Err(RopeError::BadHeadDim(head_dim));
    }
    let base = (head_dim / 3) & !1; // round down to even
    let d_h = base;
    let d_w = base;
    let d_t = head_dim - d_h - d_w;
    Ok((d_t, d_h, d_w))
}

/// Position of a text token: all three components carry timestamp*time_scale.
pub fn text_position(timestamp: f64, time_scale: f64) -> Result<Position3D, RopeError> {
    if timestamp < 0.0 {
        return Err(RopeError::NegativeTimestamp(timestamp));
    }
    if time_scale <= 0.0 {
        return Err(RopeError::BadTimeScale(time_scale));
    }
    let tau = timestamp * time_scale;
    Ok(Position3D {
        t: tau,
        h: tau.round() as i64,
        w: tau.round() as i64,
    })
}

/// Position of one visual patch of a frame.
pub fn visual_position(
    frame_time: f64,
    time_scale: f64,
    row: usize,
    col: usize,
    grid: (usize, usize),
) -> Result<Position3D, RopeError> {
    if frame_time < 0.0 {
        return Err(RopeError::NegativeTimestamp(frame_time));
    }
    if time_scale <= 0.0 {
        return Err(RopeError::BadTimeScale(time_scale));
    }
    if row >= grid.0 || col >= grid.1 {
        return Err(RopeError::OutOfGrid {
            row: row as i64,
            col: col as i64,
            rows: grid.0,
            cols: grid.1,
        });
    }
    Ok(Position3D {
        t: frame_time * time_scale,
        h: row as i64,
        w: col as i64,
    })
}

/// Text tokens degenerate to the raw temporal coordinate on the h/w slices,
/// which is real-valued; `text_position` rounds h/w for the integer fields
/// but rotation uses the continuous coordinate. This helper returns the
/// three per-component rotation coordinates actually used for a position.
fn component_coords(pos: Position3D, text_like: bool) -> [f64; 3] {
    if text_like {
        [pos.t, pos.t, pos.t]
    } else {
        [pos.t, pos.h as f64, pos.w as f64]
    }
}

fn rotate_slice<T: Real>(slice: &mut [T], coord: f64, theta: f64, invert: bool) {
    let d = slice.len();
    let half = d / 2;
    for i in 0..half {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let mut angle = coord * freq;
        if invert {
            angle = -angle;
        }
        let (s, c) = angle.sin_cos();
        let (s, c) = (T::from_f64(s), T::from_f64(c));
        let x1 = slice[2 * i];
        let x2 = slice[2 * i + 1];
        slice[2 * i] = x1 * c - x2 * s;
        slice[2 * i + 1] = x1 * s + x2 * c;
    }
}

fn apply_inner<T: Real>(
    vec: &mut [T],
    pos: Position3D,
    layout: &RopeLayout,
    text_like: bool,
    invert: bool,
) -> Result<(), RopeError> {
    if vec.len() != layout.head_dim {
        return Err(RopeError::LengthMismatch {
            vec_len: vec.len(),
            head_dim: layout.head_dim,
        });
    }
    let coords = component_coords(pos, text_like);
    let bounds = [0, layout.d_t, layout.d_t + layout.d_h, layout.head_dim];
    for c in 0..3 {
        rotate_slice(
            &mut vec[bounds[c]..bounds[c + 1]],
            coords[c],
            layout.theta,
            invert,
        );
    }
    Ok(())
}

/// Rotate a head vector in place by the three per-component angles of `pos`.
/// Text tokens use the temporal coordinate for all three slices.
pub fn apply_rope3d<T: Real>(
    vec: &mut [T],
    pos: Position3D,
    layout: &RopeLayout,
    text_like: bool,
) -> Result<(), RopeError> {
    apply_inner(vec, pos, layout, text_like, false)
}

/// Inverse rotation; the backward pass of apply_rope3d is this applied to
/// the incoming gradient (rotations are orthogonal).
pub fn apply_rope3d_inverse<T: Real>(
    vec: &mut [T],
    pos: Position3D,
    layout: &RopeLayout,
    text_like: bool,
) -> Result<(), RopeError> {
    apply_inner(vec, pos, layout, text_like, true)
}

/// Lightweight frame stamp for position assignment without pulling in the
/// full model frame type.
#[derive(Debug, Clone, Copy)]
pub struct FrameStamp {
    pub time: f64,
    pub grid: (usize, usize),
}

/// Positions for a text stream and a list of frames, computed independently
/// per token from its own timestamp. There is deliberately no sequential
/// index offset between the two streams: a text token's temporal coordinate
/// never depends on how many visual tokens precede it.
pub fn parallel_positions(
    text_times: &[f64],
    frames: &[FrameStamp],
    time_scale: f64,
) -> Result<(Vec<Position3D>, Vec<Vec<Position3D>>), RopeError> {
    let text = text_times
        .iter()
        .map(|&t| text_position(t, time_scale))
        .collect::<Result<Vec<_>, _>>()?;
    let mut visual = Vec::with_capacity(frames.len());
    for f in frames {
        let mut ps = Vec::with_capacity(f.grid.0 * f.grid.1);
        for r in 0..f.grid.0 {
            for c in 0..f.grid.1 {
                ps.push(visual_position(f.time, time_scale, r, c, f.grid)?);
            }
        }
        visual.push(ps);
    }
    Ok((text, visual))
}
