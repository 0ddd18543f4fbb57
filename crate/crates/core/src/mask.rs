//! Encoder patch masking and latent token masking.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;
use rand::Rng;

use crate::error::{LamaeError, Result};

/// Position of one token inside a study: sampled view slot, time slot, and
/// spatial patch index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenCoord {
    pub view: usize,
    pub slot: usize,
    pub patch: usize,
}

/// Partition of one frame's patch indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl FrameMask {
    pub fn unmasked(t: usize) -> Self {
        Self {
            visible: (0..t).collect(),
            masked: Vec::new(),
        }
    }

    pub fn is_partition_of(&self, t: usize) -> bool {
        let mut seen = vec![false; t];
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.visible) || !sorted(&self.masked) {
            return false;
        }
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= t || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// `round(alpha * t)` with halves rounded up.
pub fn masked_count(t: usize, alpha: f64) -> usize {
    (alpha * t as f64 + 0.5).floor() as usize
}

/// Samples a uniform masked subset of `round(alpha_e * t)` patches for each of
/// `frames` frames. In tube mode one draw is shared by every frame.
pub fn sample_encoder_mask<R: Rng + ?Sized>(
    t: usize,
    alpha_e: f64,
    rng: &mut R,
    tube: bool,
    frames: usize,
) -> Result<Vec<FrameMask>> {
    if !(alpha_e > 0.0 && alpha_e < 1.0) {
        return Err(LamaeError::Config(format!("alpha_e {alpha_e} outside (0, 1)")));
    }
    let n = masked_count(t, alpha_e);
    if n == 0 || n >= t {
        return Err(LamaeError::Config(format!(
            "mask ratio {alpha_e} over {t} tokens leaves {} visible and {n} masked",
            t.saturating_sub(n)
        )));
    }
    let draw = |rng: &mut R| {
        let mut is_masked = vec![false; t];
        for i in index::sample(rng, t, n) {
            is_masked[i] = true;
        }
        let (masked, visible): (Vec<usize>, Vec<usize>) = (0..t).partition(|&i| is_masked[i]);
        FrameMask { visible, masked }
    };
    if tube {
        let m = draw(rng);
        Ok(vec![m; frames])
    } else {
        Ok((0..frames).map(|_| draw(rng)).collect())
    }
}

/// Uniform subset of `round(alpha_la * N)` of the given token coordinates.
pub fn sample_latent_mask<R: Rng + ?Sized>(
    coords: &[TokenCoord],
    alpha_la: f64,
    rng: &mut R,
) -> Result<BTreeSet<TokenCoord>> {
    if !(0.0..1.0).contains(&alpha_la) {
        return Err(LamaeError::Config(format!("alpha_la {alpha_la} outside [0, 1)")));
    }
    let n = masked_count(coords.len(), alpha_la).min(coords.len().saturating_sub(1));
    if n == 0 {
        return Ok(BTreeSet::new());
    }
    Ok(index::sample(rng, coords.len(), n)
        .into_iter()
        .map(|i| coords[i])
        .collect())
}

/// Masking decisions for one study.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub tokens_per_frame: usize,
    /// `frames[view][slot]`.
    pub frames: Vec<Vec<FrameMask>>,
    pub alpha_e: f64,
    pub alpha_la: f64,
    pub latent_dropped: BTreeSet<TokenCoord>,
}

impl MaskPlan {
    /// Everything visible, nothing dropped (finetuning and evaluation).
    pub fn unmasked(views: usize, slots: usize, t: usize) -> Self {
        Self {
            tokens_per_frame: t,
            frames: vec![vec![FrameMask::unmasked(t); slots]; views],
            alpha_e: 0.0,
            alpha_la: 0.0,
            latent_dropped: BTreeSet::new(),
        }
    }

    /// Draws encoder masks for every view (tube masks when `tube`), then a
    /// latent mask over the pooled encoder-visible tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        views: usize,
        slots: usize,
        t: usize,
        alpha_e: f64,
        alpha_la: f64,
        tube: bool,
        enc_rng: &mut R1,
        latent_rng: &mut R2,
    ) -> Result<Self> {
        let frames = (0..views)
            .map(|_| sample_encoder_mask(t, alpha_e, enc_rng, tube, slots))
            .collect::<Result<Vec<_>>>()?;
        let mut plan = Self {
            tokens_per_frame: t,
            frames,
            alpha_e,
            alpha_la,
            latent_dropped: BTreeSet::new(),
        };
        plan.latent_dropped = sample_latent_mask(&plan.visible_coords(), alpha_la, latent_rng)?;
        Ok(plan)
    }

    pub fn views(&self) -> usize {
        self.frames.len()
    }

    pub fn slots(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Encoder-visible tokens in canonical (view, slot, patch) order.
    pub fn visible_coords(&self) -> Vec<TokenCoord> {
        let mut out = Vec::new();
        for (view, slots) in self.frames.iter().enumerate() {
            for (slot, m) in slots.iter().enumerate() {
                out.extend(m.visible.iter().map(|&patch| TokenCoord { view, slot, patch }));
            }
        }
        out
    }

    pub fn masked_total(&self) -> usize {
        self.frames.iter().flatten().map(|m| m.masked.len()).sum()
    }

    /// Checks the partition and subset invariants.
    pub fn validate(&self) -> Result<()> {
        for (view, slots) in self.frames.iter().enumerate() {
            if slots.len() != self.slots() {
                return Err(LamaeError::Integrity(format!("view {view} has {} slots", slots.len())));
            }
            for (slot, m) in slots.iter().enumerate() {
                if !m.is_partition_of(self.tokens_per_frame) {
                    return Err(LamaeError::Integrity(format!(
                        "view {view} slot {slot}: visible/masked do not partition 0..{}",
                        self.tokens_per_frame
                    )));
                }
            }
        }
        for c in &self.latent_dropped {
            let visible = self
                .frames
                .get(c.view)
                .and_then(|s| s.get(c.slot))
                .is_some_and(|m| m.visible.binary_search(&c.patch).is_ok());
            if !visible {
                return Err(LamaeError::Integrity(format!(
                    "latent mask drops non-visible token {c:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Gather index that lays out the decoder input for one decoding unit.
///
/// `positions` lists the unit's token coordinates in output order. Each
/// position whose token survived (present in `surviving`, mapping coordinate
/// to row) takes that row; every other position takes `mask_row`. The
/// returned flags mark mask-token positions. A surviving coordinate of the
/// unit (per `in_unit`) that is not among `positions` is an integrity error.
pub fn restore_index(
    positions: &[TokenCoord],
    surviving: &HashMap<TokenCoord, usize>,
    in_unit: impl Fn(&TokenCoord) -> bool,
    mask_row: usize,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut used = 0;
    let mut index = Vec::with_capacity(positions.len());
    let mut is_mask = Vec::with_capacity(positions.len());
    for c in positions {
        match surviving.get(c) {
            Some(&row) => {
                used += 1;
                index.push(row);
                is_mask.push(false);
            }
            None => {
                index.push(mask_row);
                is_mask.push(true);
            }
        }
    }
    let expected = surviving.keys().filter(|c| in_unit(c)).count();
    if used != expected {
        let stray = surviving.keys().filter(|c| in_unit(c)).find(|c| !positions.contains(c));
        return Err(LamaeError::Integrity(format!(
            "token {stray:?} survived but has no position in the plan"
        )));
    }
    Ok((index, is_mask))
}
