//! The four architectures: encoder, latent fusion, decoder, losses, heads.
//!
//! A study is encoded frame by frame (image variants) or clip by clip (video
//! variants). The latent stage concatenates every surviving token of the
//! study and, for the latent-attention variants, runs a transformer over the
//! whole set. Reconstruction decodes each frame or clip separately.

use std::collections::HashMap;

use lamae_tensor::{Float, Tensor, Var};

use crate::config::{LossNorm, ModelConfig, Task};
use crate::error::{LamaeError, Result};
use crate::mask::{restore_index, MaskPlan, TokenCoord};
use crate::params::{
    embed_prefix, init_params, pretrain_specs, ParamStore, Session, Trainable, FEATURE_SCALE, FEATURE_SHIFT,
};
use crate::rng::{name_key, RngStreams, Stream};
use crate::vit::{embed_tokens, linear, position_rows, transformer_stack, tubify, PosKind};

/// Model-ready pixels of one study: patch tables `[tokens_per_frame,
/// patch_pixels]` indexed `[view][frame]`, in sampled slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyInput<T> {
    pub study_id: String,
    pub frames: Vec<Vec<Tensor<T>>>,
    pub labels: Option<Vec<f64>>,
    pub target: Option<f64>,
}

impl<T: Float> StudyInput<T> {
    pub fn views(&self) -> usize {
        self.frames.len()
    }

    pub fn frames_per_view(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

/// Latent tokens of one study with their coordinates, row-aligned.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub study_id: String,
    pub tokens: Var,
    pub coords: Vec<TokenCoord>,
}

/// Decoder output for one decoding unit: a frame (image variants) or a view's
/// clip (video variants). `pred` rows follow `positions`.
#[derive(Clone, Debug)]
pub struct UnitReconstruction {
    pub view: usize,
    pub positions: Vec<TokenCoord>,
    pub pred: Var,
}

/// Draws the mask plan for one study at one epoch. Streams are keyed by the
/// study id, so the draw does not depend on batch composition.
pub fn sample_plan(cfg: &ModelConfig, streams: &RngStreams, epoch: u64, study_id: &str) -> Result<MaskPlan> {
    let key = [epoch, name_key(study_id)];
    let mut enc = streams.stream(Stream::EncoderMask, &key);
    let mut lat = streams.stream(Stream::LatentMask, &key);
    MaskPlan::sample(
        cfg.views_per_study,
        cfg.time_slots(),
        cfg.grid.tokens_per_frame(),
        cfg.alpha_e,
        cfg.alpha_la,
        cfg.variant.is_video(),
        &mut enc,
        &mut lat,
    )
}

fn check_input<T: Float>(input: &StudyInput<T>, plan: &MaskPlan, cfg: &ModelConfig) -> Result<()> {
    if input.views() == 0 || input.frames_per_view() == 0 {
        return Err(LamaeError::Integrity(format!("study {} has no frames", input.study_id)));
    }
    let slots = if cfg.variant.is_video() {
        input.frames_per_view() / cfg.grid.time_patch
    } else {
        input.frames_per_view()
    };
    if plan.views() != input.views() || plan.slots() != slots {
        return Err(LamaeError::Integrity(format!(
            "study {}: {} views x {} slots, mask plan covers {} x {}",
            input.study_id,
            input.views(),
            slots,
            plan.views(),
            plan.slots()
        )));
    }
    let shape = [cfg.grid.tokens_per_frame(), cfg.grid.patch_pixels()];
    for (j, view) in input.frames.iter().enumerate() {
        if view.len() != input.frames_per_view() {
            return Err(LamaeError::Integrity(format!(
                "study {} view {j} has {} frames",
                input.study_id,
                view.len()
            )));
        }
        if let Some(f) = view.iter().find(|f| f.shape() != shape) {
            return Err(LamaeError::Integrity(format!(
                "study {} view {j}: patch table {:?}, expected {:?}",
                input.study_id,
                f.shape(),
                shape
            )));
        }
    }
    Ok(())
}

/// Pixel table of one decoding unit and its row coordinates.
fn unit_table<T: Float>(
    input: &StudyInput<T>,
    cfg: &ModelConfig,
    view: usize,
    slot: usize,
) -> Result<(Tensor<T>, Vec<TokenCoord>)> {
    let t = cfg.grid.tokens_per_frame();
    if cfg.variant.is_video() {
        let table = tubify(&input.frames[view], &cfg.grid)?;
        let slots = table.shape()[0] / t;
        let coords = (0..slots)
            .flat_map(|slot| (0..t).map(move |patch| TokenCoord { view, slot, patch }))
            .collect();
        Ok((table, coords))
    } else {
        let coords = (0..t).map(|patch| TokenCoord { view, slot, patch }).collect();
        Ok((input.frames[view][slot].clone(), coords))
    }
}

/// `(view, slot)` pairs that start a decoding unit.
fn units(cfg: &ModelConfig, plan: &MaskPlan) -> Vec<(usize, usize)> {
    (0..plan.views())
        .flat_map(|j| {
            let slots = if cfg.variant.is_video() { 1 } else { plan.slots() };
            (0..slots).map(move |k| (j, k))
        })
        .collect()
}

fn pos_kind(cfg: &ModelConfig) -> PosKind {
    if cfg.variant.is_video() {
        PosKind::SpaceTime
    } else {
        PosKind::Spatial
    }
}

/// Embeds the encoder-visible patches of every frame (or clip) and runs the
/// encoder on each independently.
pub fn encode_study<T: Float>(
    s: &mut Session<'_, T>,
    input: &StudyInput<T>,
    plan: &MaskPlan,
    cfg: &ModelConfig,
) -> Result<TokenBatch> {
    check_input(input, plan, cfg)?;
    let mut blocks = Vec::new();
    let mut coords = Vec::new();
    for (view, slot) in units(cfg, plan) {
        let (table, unit_coords) = unit_table(input, cfg, view, slot)?;
        let mut rows = Vec::new();
        let mut pos = Vec::new();
        for (row, c) in unit_coords.iter().enumerate() {
            if plan.frames[c.view][c.slot].visible.binary_search(&c.patch).is_ok() {
                rows.push(row);
                pos.push((c.slot, c.patch));
                coords.push(*c);
            }
        }
        let x = embed_tokens(
            s,
            embed_prefix(cfg),
            &table,
            &rows,
            &pos,
            pos_kind(cfg),
            cfg.grid.side(),
        )?;
        blocks.push(transformer_stack(
            s,
            x,
            "encoder",
            &cfg.encoder,
            cfg.ln_eps,
            cfg.dropout,
        )?);
    }
    let tokens = if blocks.len() == 1 {
        blocks[0]
    } else {
        s.graph.concat(&blocks, 0)?
    };
    Ok(TokenBatch {
        study_id: input.study_id.clone(),
        tokens,
        coords,
    })
}

/// Adds slot embeddings, drops latent-masked tokens, and runs the latent
/// stack over every remaining token of the study at once.
pub fn latent_fuse<T: Float>(
    s: &mut Session<'_, T>,
    batch: TokenBatch,
    plan: &MaskPlan,
    cfg: &ModelConfig,
) -> Result<TokenBatch> {
    let mut x = batch.tokens;
    if cfg.identity_embeddings {
        let views: Vec<usize> = batch.coords.iter().map(|c| c.view).collect();
        let slots: Vec<usize> = batch.coords.iter().map(|c| c.slot).collect();
        let ve = s.p("latent.view_embed")?;
        let fe = s.p("latent.frame_embed")?;
        let ve = s.graph.embedding(ve, &views)?;
        let fe = s.graph.embedding(fe, &slots)?;
        x = s.graph.add(x, ve)?;
        x = s.graph.add(x, fe)?;
    }
    let mut coords = batch.coords;
    if !plan.latent_dropped.is_empty() {
        let keep: Vec<usize> = (0..coords.len())
            .filter(|&i| !plan.latent_dropped.contains(&coords[i]))
            .collect();
        x = s.graph.gather_rows(x, &keep)?;
        coords = keep.iter().map(|&i| coords[i]).collect();
    }
    let x = transformer_stack(s, x, "latent", &cfg.latent, cfg.ln_eps, cfg.dropout)?;
    Ok(TokenBatch {
        study_id: batch.study_id,
        tokens: x,
        coords,
    })
}

/// Projects fused tokens to the decoder width, fills every missing position
/// of each unit with the mask token plus its position code, and decodes.
pub fn decode_and_reconstruct<T: Float>(
    s: &mut Session<'_, T>,
    fused: &TokenBatch,
    plan: &MaskPlan,
    cfg: &ModelConfig,
) -> Result<Vec<UnitReconstruction>> {
    let dd = cfg.decoder.embed_dim;
    let proj = linear(s, fused.tokens, "decoder.proj", true)?;
    let mask_token = s.p("decoder.mask_token")?;
    let table = s.graph.concat(&[proj, mask_token], 0)?;
    let mask_row = fused.coords.len();
    let surviving: HashMap<TokenCoord, usize> = fused.coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let t = cfg.grid.tokens_per_frame();
    let video = cfg.variant.is_video();
    let mut out = Vec::new();
    for (view, slot) in units(cfg, plan) {
        let positions: Vec<TokenCoord> = if video {
            (0..plan.slots())
                .flat_map(|slot| (0..t).map(move |patch| TokenCoord { view, slot, patch }))
                .collect()
        } else {
            (0..t).map(|patch| TokenCoord { view, slot, patch }).collect()
        };
        let (index, is_mask) = restore_index(
            &positions,
            &surviving,
            |c| c.view == view && (video || c.slot == slot),
            mask_row,
        )?;
        let x = s.graph.gather_rows(table, &index)?;
        let coords: Vec<(usize, usize)> = positions.iter().map(|c| (c.slot, c.patch)).collect();
        let mut pos = position_rows::<T>(pos_kind(cfg), dd, cfg.grid.side(), &coords);
        for (row, &m) in is_mask.iter().enumerate() {
            if !m {
                pos.data_mut()[row * dd..(row + 1) * dd].fill(T::zero());
            }
        }
        let pos = s.constant(pos);
        let x = s.graph.add(x, pos)?;
        let x = transformer_stack(s, x, "decoder", &cfg.decoder, cfg.ln_eps, cfg.dropout)?;
        let pred = linear(s, x, "decoder.head", true)?;
        out.push(UnitReconstruction { view, positions, pred });
    }
    Ok(out)
}

/// Per-patch standardization of reconstruction targets.
fn normalize_rows<T: Float>(table: &mut Tensor<T>) {
    let cols = table.shape()[1];
    for row in table.data_mut().chunks_mut(cols) {
        let n = cols as f64;
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row {
            *v = T::from_f64((v.as_f64() - mean) * inv);
        }
    }
}

/// Masked-patch reconstruction loss of one study.
///
/// Each encoder-masked patch contributes the mean squared error over its
/// pixels, weighted by `1 / (alpha_e |V| |S|)`; `MeanMasked` further divides
/// by the tokens per frame. Visible patches never enter the sum.
pub fn reconstruction_loss<T: Float>(
    s: &mut Session<'_, T>,
    input: &StudyInput<T>,
    recon: &[UnitReconstruction],
    plan: &MaskPlan,
    cfg: &ModelConfig,
) -> Result<Var> {
    if plan.masked_total() == 0 {
        return Err(LamaeError::Config(
            "reconstruction loss over an empty masked set".into(),
        ));
    }
    let t = cfg.grid.tokens_per_frame();
    let pixels = cfg.grid.patch_pixels() * cfg.grid.time_patch;
    let mut weight = 1.0 / (plan.alpha_e * plan.views() as f64 * plan.slots() as f64 * pixels as f64);
    if cfg.loss_norm == LossNorm::MeanMasked {
        weight /= t as f64;
    }
    let mut terms = Vec::new();
    for unit in recon {
        let first = unit.positions[0];
        let (mut table, coords) = unit_table(input, cfg, unit.view, first.slot)?;
        if coords != unit.positions {
            return Err(LamaeError::Integrity(format!(
                "view {}: reconstruction positions out of order",
                unit.view
            )));
        }
        if s.graph.shape(unit.pred) != table.shape() {
            return Err(LamaeError::Integrity(format!(
                "view {}: reconstruction {:?} vs target {:?}",
                unit.view,
                s.graph.shape(unit.pred),
                table.shape()
            )));
        }
        let rows: Vec<usize> = coords
            .iter()
            .enumerate()
            .filter(|(_, c)| plan.frames[c.view][c.slot].masked.binary_search(&c.patch).is_ok())
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        if cfg.pixel_norm {
            normalize_rows(&mut table);
        }
        let target = s.constant(table);
        let target = s.graph.gather_rows(target, &rows)?;
        let pred = s.graph.gather_rows(unit.pred, &rows)?;
        let diff = s.graph.sub(pred, target)?;
        let sq = s.graph.mul(diff, diff)?;
        let sum = s.graph.sum(sq);
        terms.push(s.graph.scale(sum, T::from_f64(weight)));
    }
    let mut loss = terms[0];
    for &term in &terms[1..] {
        loss = s.graph.add(loss, term)?;
    }
    Ok(loss)
}

/// Full pretraining forward pass for one study.
pub fn pretrain_loss<T: Float>(
    s: &mut Session<'_, T>,
    input: &StudyInput<T>,
    plan: &MaskPlan,
    cfg: &ModelConfig,
) -> Result<Var> {
    let batch = encode_study(s, input, plan, cfg)?;
    let fused = latent_fuse(s, batch, plan, cfg)?;
    let recon = decode_and_reconstruct(s, &fused, plan, cfg)?;
    reconstruction_loss(s, input, &recon, plan, cfg)
}

/// Averages tokens within each frame, then frames within each view, then
/// views, and applies the two-layer head.
pub fn pool_and_head<T: Float>(s: &mut Session<'_, T>, fused: &TokenBatch) -> Result<Var> {
    let pooled = pool(s, fused)?;
    let shift = s.p(FEATURE_SHIFT)?;
    let scale = s.p(FEATURE_SCALE)?;
    let centered = s.graph.sub(pooled, shift)?;
    let pooled = s.graph.mul(centered, scale)?;
    let h = linear(s, pooled, "head.fc1", true)?;
    let h = s.graph.gelu(h);
    linear(s, h, "head.fc2", true)
}

/// Pooled token `[1, D]` of a study.
pub fn pool<T: Float>(s: &mut Session<'_, T>, fused: &TokenBatch) -> Result<Var> {
    if fused.coords.is_empty() {
        return Err(LamaeError::Integrity(format!(
            "study {} has no tokens to pool",
            fused.study_id
        )));
    }
    let mut per_frame: HashMap<(usize, usize), usize> = HashMap::new();
    for c in &fused.coords {
        *per_frame.entry((c.view, c.slot)).or_default() += 1;
    }
    let mut slots_per_view: HashMap<usize, usize> = HashMap::new();
    for &(view, _) in per_frame.keys() {
        *slots_per_view.entry(view).or_default() += 1;
    }
    let views = slots_per_view.len() as f64;
    let w: Vec<T> = fused
        .coords
        .iter()
        .map(|c| {
            let n = per_frame[&(c.view, c.slot)] as f64;
            let f = slots_per_view[&c.view] as f64;
            T::from_f64(1.0 / (views * f * n))
        })
        .collect();
    let w = s.constant(Tensor::new(vec![1, w.len()], w)?);
    Ok(s.graph.matmul(w, fused.tokens)?)
}

/// Head output `[1, outputs]` for one study, with no masking.
pub fn predict<T: Float>(s: &mut Session<'_, T>, input: &StudyInput<T>, cfg: &ModelConfig) -> Result<Var> {
    let plan = MaskPlan::unmasked(input.views(), cfg.time_slots(), cfg.grid.tokens_per_frame());
    let batch = encode_study(s, input, &plan, cfg)?;
    let fused = latent_fuse(s, batch, &plan, cfg)?;
    pool_and_head(s, &fused)
}

/// Task loss of one study given its head output.
pub fn task_loss<T: Float>(
    s: &mut Session<'_, T>,
    out: Var,
    input: &StudyInput<T>,
    cfg: &ModelConfig,
    task: Task,
) -> Result<Var> {
    match task {
        Task::Multilabel => {
            let labels = input
                .labels
                .as_ref()
                .ok_or_else(|| LamaeError::Data(format!("study {} has no labels", input.study_id)))?;
            let y = Tensor::new(vec![1, labels.len()], labels.iter().map(|&v| T::from_f64(v)).collect())?;
            Ok(s.graph.bce_with_logits(out, &y)?)
        }
        Task::Regression => {
            let target = input
                .target
                .ok_or_else(|| LamaeError::Data(format!("study {} has no regression target", input.study_id)))?;
            let z = (target - cfg.regression_offset) / cfg.regression_scale;
            let y = s.constant(Tensor::new(vec![1, 1], vec![T::from_f64(z)])?);
            let diff = s.graph.sub(out, y)?;
            let sq = s.graph.mul(diff, diff)?;
            Ok(s.graph.mean(sq))
        }
    }
}

/// Maps a regression head output back to target units.
pub fn regression_value(cfg: &ModelConfig, raw: f64) -> f64 {
    raw * cfg.regression_scale + cfg.regression_offset
}

/// Pretraining loss and gradient table for one study.
fn loss_and_grads(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    input: &StudyInput<f64>,
    plan: &MaskPlan,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor<f64>>)> {
    let mut s = Session::new(params, Trainable::All);
    let loss = pretrain_loss(&mut s, input, plan, cfg)?;
    s.backward(loss)?;
    Ok((s.value(loss).item()?, s.grads()))
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Checks that a latent-attention model configured to do nothing (no layers,
/// no latent masking, no slot embeddings) computes the same pretraining loss
/// and gradients as its baseline, at f64, for parameters drawn from `seed`.
/// Returns the first diverging named tensor on failure.
pub fn assert_mae_equivalence(
    cfg_la: &ModelConfig,
    cfg_mae: &ModelConfig,
    seed: u64,
    inputs: &[StudyInput<f64>],
) -> Result<()> {
    if !cfg_la.variant.has_latent_attention() || cfg_la.variant.baseline() != cfg_mae.variant {
        return Err(LamaeError::Config(format!(
            "{} is not the latent-attention counterpart of {}",
            cfg_la.variant.display_name(),
            cfg_mae.variant.display_name()
        )));
    }
    if cfg_la.latent.num_layers != 0 || cfg_la.alpha_la != 0.0 || cfg_la.identity_embeddings {
        return Err(LamaeError::Config(
            "equivalence needs 0 latent layers, alpha_la = 0 and identity embeddings off".into(),
        ));
    }
    let pa: ParamStore<f64> = init_params(&pretrain_specs(cfg_la), seed);
    let pb: ParamStore<f64> = init_params(&pretrain_specs(cfg_mae), seed);
    let streams = RngStreams::new(seed);
    for input in inputs {
        let plan_a = sample_plan(cfg_la, &streams, 0, &input.study_id)?;
        let plan_b = sample_plan(cfg_mae, &streams, 0, &input.study_id)?;
        let (la, ga) = loss_and_grads(cfg_la, &pa, input, &plan_a)?;
        let (lb, gb) = loss_and_grads(cfg_mae, &pb, input, &plan_b)?;
        if !rel_close(la, lb, 1e-12) {
            return Err(LamaeError::Equivalence {
                tensor: "loss".into(),
                detail: format!("study {}: {la:e} vs {lb:e}", input.study_id),
            });
        }
        for name in ga.keys().chain(gb.keys()) {
            let (a, b) = match (ga.get(name), gb.get(name)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(LamaeError::Equivalence {
                        tensor: name.clone(),
                        detail: "present in only one model".into(),
                    })
                }
            };
            if let Some((i, (x, y))) = a
                .data()
                .iter()
                .zip(b.data())
                .enumerate()
                .find(|(_, (x, y))| !rel_close(**x, **y, 1e-10))
            {
                return Err(LamaeError::Equivalence {
                    tensor: format!("grad/{name}"),
                    detail: format!("element {i}: {x:e} vs {y:e}"),
                });
            }
        }
    }
    Ok(())
}
