//! Patch and tube embedding, fixed sinusoidal positions, transformer stacks.

use lamae_tensor::{Float, Tensor, Var};

use crate::config::{BlockConfig, PatchGrid};
use crate::error::{LamaeError, Result};
use crate::params::Session;

/// `[sin(p w_0), .., sin(p w_{m-1}), cos(p w_0), .., cos(p w_{m-1})]` with
/// `m = dim / 2` and `w_i = 10000^(-i/m)`.
fn sincos_1d(dim: usize, pos: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    let p = pos as f64;
    let omega = |i: usize| 10000f64.powf(-(i as f64) / half.max(1) as f64);
    out.extend((0..half).map(|i| (p * omega(i)).sin()));
    out.extend((0..half).map(|i| (p * omega(i)).cos()));
}

/// Width split for (row, col) position channels; both parts are even.
fn split_2d(dim: usize) -> (usize, usize) {
    let row = 2 * (dim / 4);
    (row, dim - row)
}

/// Width split for (time, row, col) position channels.
fn split_3d(dim: usize) -> (usize, usize, usize) {
    let t = 2 * (dim / 6);
    let row = 2 * ((dim - t) / 4);
    (t, row, dim - t - row)
}

/// 2-D encoding of the patch at raster index `patch` on a `side x side` grid.
pub fn pos_2d(dim: usize, side: usize, patch: usize) -> Vec<f64> {
    let (dr, dc) = split_2d(dim);
    let mut out = Vec::with_capacity(dim);
    sincos_1d(dr, patch / side, &mut out);
    sincos_1d(dc, patch % side, &mut out);
    out
}

/// 3-D encoding of (time slot, row, col).
pub fn pos_3d(dim: usize, side: usize, slot: usize, patch: usize) -> Vec<f64> {
    let (dt, dr, dc) = split_3d(dim);
    let mut out = Vec::with_capacity(dim);
    sincos_1d(dt, slot, &mut out);
    sincos_1d(dr, patch / side, &mut out);
    sincos_1d(dc, patch % side, &mut out);
    out
}

/// Position of a token given its time slot and spatial patch index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosKind {
    Spatial,
    SpaceTime,
}

pub fn position_rows<T: Float>(kind: PosKind, dim: usize, side: usize, tokens: &[(usize, usize)]) -> Tensor<T> {
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for &(slot, patch) in tokens {
        let row = match kind {
            PosKind::Spatial => pos_2d(dim, side, patch),
            PosKind::SpaceTime => pos_3d(dim, side, slot, patch),
        };
        data.extend(row.into_iter().map(T::from_f64));
    }
    Tensor::new(vec![tokens.len(), dim], data).expect("rows of width dim")
}

/// Splits a `C x H x W` frame into `[tokens_per_frame, C * p * p]` patch rows
/// in raster order. Each row lists channels, then patch rows, then columns.
pub fn patchify<T: Float>(frame: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let expect = [grid.channels, grid.image_size, grid.image_size];
    if frame.shape() != expect {
        return Err(LamaeError::Integrity(format!(
            "frame of shape {:?} does not match grid {:?}",
            frame.shape(),
            expect
        )));
    }
    let (c, s, p) = (grid.channels, grid.image_size, grid.patch_size);
    let side = grid.side();
    let src = frame.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..side {
        for pc in 0..side {
            for ch in 0..c {
                for y in 0..p {
                    let base = ch * s * s + (pr * p + y) * s + pc * p;
                    out.extend_from_slice(&src[base..base + p]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![grid.tokens_per_frame(), grid.patch_pixels()], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(patches: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let expect = [grid.tokens_per_frame(), grid.patch_pixels()];
    if patches.shape() != expect {
        return Err(LamaeError::Integrity(format!(
            "patch table of shape {:?}, expected {:?}",
            patches.shape(),
            expect
        )));
    }
    let (c, s, p) = (grid.channels, grid.image_size, grid.patch_size);
    let side = grid.side();
    let mut out = vec![T::zero(); c * s * s];
    let mut src = patches.data().iter();
    for pr in 0..side {
        for pc in 0..side {
            for ch in 0..c {
                for y in 0..p {
                    let base = ch * s * s + (pr * p + y) * s + pc * p;
                    for v in &mut out[base..base + p] {
                        *v = *src.next().expect("sized above");
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, s, s], out)?)
}

/// Builds tube rows for a clip of patchified frames: token `(slot, patch)`
/// concatenates patch `patch` of frames `slot*tp .. slot*tp + tp`. Rows are
/// ordered slot-major.
pub fn tubify<T: Float>(frames: &[Tensor<T>], grid: &PatchGrid) -> Result<Tensor<T>> {
    let tp = grid.time_patch;
    if frames.is_empty() || !frames.len().is_multiple_of(tp) {
        return Err(LamaeError::Integrity(format!(
            "time patch {tp} does not divide a clip of {} frames",
            frames.len()
        )));
    }
    let t = grid.tokens_per_frame();
    let pp = grid.patch_pixels();
    let slots = frames.len() / tp;
    let mut out = Vec::with_capacity(frames.len() * t * pp);
    for s in 0..slots {
        for patch in 0..t {
            for f in &frames[s * tp..(s + 1) * tp] {
                out.extend_from_slice(f.row(patch));
            }
        }
    }
    Ok(Tensor::new(vec![slots * t, tp * pp], out)?)
}

/// Linear patch embedding of the selected `rows` of a patch table, plus
/// their positional encodings. `coords[i]` is the (slot, patch) of `rows[i]`.
pub fn embed_tokens<T: Float>(
    s: &mut Session<'_, T>,
    prefix: &str,
    table: &Tensor<T>,
    rows: &[usize],
    coords: &[(usize, usize)],
    kind: PosKind,
    side: usize,
) -> Result<Var> {
    let x = s.constant(table.clone());
    let x = s.graph.gather_rows(x, rows)?;
    let w = s.p(&format!("{prefix}.weight"))?;
    let b = s.p(&format!("{prefix}.bias"))?;
    let h = s.graph.linear(x, w, Some(b))?;
    let dim = s.graph.shape(h)[1];
    let pos = s.constant(position_rows(kind, dim, side, coords));
    Ok(s.graph.add(h, pos)?)
}

pub fn layernorm<T: Float>(s: &mut Session<'_, T>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let g = s.p(&format!("{prefix}.gain"))?;
    let b = s.p(&format!("{prefix}.bias"))?;
    Ok(s.graph.layernorm(x, g, b, eps)?)
}

pub fn linear<T: Float>(s: &mut Session<'_, T>, x: Var, prefix: &str, bias: bool) -> Result<Var> {
    let w = s.p(&format!("{prefix}.weight"))?;
    let b = if bias {
        Some(s.p(&format!("{prefix}.bias"))?)
    } else {
        None
    };
    Ok(s.graph.linear(x, w, b)?)
}

fn self_attention<T: Float>(s: &mut Session<'_, T>, x: Var, prefix: &str, cfg: &BlockConfig) -> Result<Var> {
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let qkv = linear(s, x, &format!("{prefix}.qkv"), cfg.qkv_bias)?;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = s.graph.narrow(qkv, 1, h * hd, hd)?;
        let k = s.graph.narrow(qkv, 1, d + h * hd, hd)?;
        let v = s.graph.narrow(qkv, 1, 2 * d + h * hd, hd)?;
        heads.push(s.graph.attention(q, k, v, scale)?);
    }
    let o = if heads.len() == 1 {
        heads[0]
    } else {
        s.graph.concat(&heads, 1)?
    };
    linear(s, o, &format!("{prefix}.proj"), true)
}

/// Pre-norm transformer stack over `x: [n, embed_dim]`, ending in a layer
/// norm. With zero layers it returns `x` itself.
pub fn transformer_stack<T: Float>(
    s: &mut Session<'_, T>,
    x: Var,
    prefix: &str,
    cfg: &BlockConfig,
    eps: f64,
    dropout: f64,
) -> Result<Var> {
    let width = s.graph.shape(x).get(1).copied();
    if width != Some(cfg.embed_dim) || s.graph.shape(x).len() != 2 {
        return Err(LamaeError::Integrity(format!(
            "{prefix}: tokens of shape {:?}, stack width {}",
            s.graph.shape(x),
            cfg.embed_dim
        )));
    }
    if cfg.num_layers == 0 {
        return Ok(x);
    }
    let mut x = x;
    for i in 0..cfg.num_layers {
        let b = format!("{prefix}.blocks.{i}");
        let h = layernorm(s, x, &format!("{b}.norm1"), eps)?;
        let h = self_attention(s, h, &format!("{b}.attn"), cfg)?;
        let h = s.dropout(h, dropout)?;
        x = s.graph.add(x, h)?;
        let h = layernorm(s, x, &format!("{b}.norm2"), eps)?;
        let h = linear(s, h, &format!("{b}.mlp.fc1"), true)?;
        let h = s.graph.gelu(h);
        let h = linear(s, h, &format!("{b}.mlp.fc2"), true)?;
        let h = s.dropout(h, dropout)?;
        x = s.graph.add(x, h)?;
    }
    layernorm(s, x, &format!("{prefix}.norm"), eps)
}
