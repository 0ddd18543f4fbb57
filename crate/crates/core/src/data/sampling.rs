//! View/frame sampling and conversion of studies into model inputs.

use lamae_tensor::{Float, Tensor};
use rand::seq::index;
use rand::Rng;

use crate::config::ModelConfig;
use crate::data::study::{Frame, Study};
use crate::error::{LamaeError, Result};
use crate::model::StudyInput;
use crate::vit::patchify;

/// Chosen views (ascending source index, repeats allowed) and, per chosen
/// view, the chosen frame indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledIndices {
    pub views: Vec<usize>,
    pub frames: Vec<Vec<usize>>,
}

impl SampledIndices {
    pub fn pairs(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}

/// `n_frames` equally spaced indices from `start` with stride
/// `window / n_frames`. Videos shorter than `window` start at 0 with stride
/// `max(1, len / n_frames)`, and indices past the end clamp to the last frame.
pub fn frame_indices(len: usize, n_frames: usize, window: usize, start: usize) -> Vec<usize> {
    if len >= window {
        let stride = (window / n_frames).max(1);
        (0..n_frames).map(|i| (start + i * stride).min(len - 1)).collect()
    } else {
        let stride = (len / n_frames).max(1);
        (0..n_frames).map(|i| (i * stride).min(len - 1)).collect()
    }
}

/// Samples views without replacement (topping up with replacement when a study
/// has fewer than `n_views`), then a random window per view.
pub fn sample_views_frames<R: Rng + ?Sized>(
    view_lengths: &[usize],
    n_views: usize,
    n_frames: usize,
    window: usize,
    rng: &mut R,
) -> Result<SampledIndices> {
    let available = view_lengths.len();
    if available == 0 || view_lengths.contains(&0) {
        return Err(LamaeError::Data("cannot sample from an empty study or view".into()));
    }
    let mut views: Vec<usize> = if available >= n_views {
        index::sample(rng, available, n_views).into_vec()
    } else {
        let mut v: Vec<usize> = (0..available).collect();
        v.extend((available..n_views).map(|_| rng.random_range(0..available)));
        v
    };
    views.sort_unstable();
    let frames = views
        .iter()
        .map(|&j| {
            let len = view_lengths[j];
            let start = if len >= window {
                rng.random_range(0..=len - window)
            } else {
                0
            };
            frame_indices(len, n_frames, window, start)
        })
        .collect();
    Ok(SampledIndices { views, frames })
}

/// Pixel intensities scaled to `[0, 1]`.
pub fn frame_values(frame: &Frame) -> Vec<f64> {
    frame.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
}

/// Random resized crop and rotation applied identically to all frames of
/// one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRotate {
    /// Crop center and size as fractions of the frame side.
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle: f64,
}

impl CropRotate {
    pub const SCALE: (f64, f64) = (0.6, 1.0);
    pub const RATIO: (f64, f64) = (0.9, 1.1);
    pub const MAX_ANGLE_DEG: f64 = 10.0;

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let scale = rng.random_range(Self::SCALE.0..=Self::SCALE.1);
        let log_ratio = rng.random_range(Self::RATIO.0.ln()..=Self::RATIO.1.ln());
        let ratio = log_ratio.exp();
        let w = (scale * ratio).sqrt().min(1.0);
        let h = (scale / ratio).sqrt().min(1.0);
        let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
        let angle = rng
            .random_range(-Self::MAX_ANGLE_DEG..=Self::MAX_ANGLE_DEG)
            .to_radians();
        Self { cx, cy, w, h, angle }
    }

    /// Resamples `src` (`side x side`, row-major) bilinearly; samples falling
    /// outside the source read as 0.
    pub fn apply(&self, src: &[f64], side: usize) -> Vec<f64> {
        let n = side as f64;
        let (sin, cos) = self.angle.sin_cos();
        let at = |x: isize, y: isize| {
            if x < 0 || y < 0 || x >= side as isize || y >= side as isize {
                0.0
            } else {
                src[y as usize * side + x as usize]
            }
        };
        let mut out = Vec::with_capacity(side * side);
        for oy in 0..side {
            for ox in 0..side {
                let u = ((ox as f64 + 0.5) / n - 0.5) * self.w;
                let v = ((oy as f64 + 0.5) / n - 0.5) * self.h;
                let sx = (self.cx + cos * u - sin * v) * n - 0.5;
                let sy = (self.cy + sin * u + cos * v) * n - 0.5;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }
}

/// Builds the model input for `study` from sampled indices. When `augment`
/// holds one transform per sampled view, it is applied to that view's frames.
pub fn to_input<T: Float>(
    study: &Study,
    sampled: &SampledIndices,
    cfg: &ModelConfig,
    augment: Option<&[CropRotate]>,
) -> Result<StudyInput<T>> {
    let size = cfg.grid.image_size;
    if cfg.grid.channels != 1 {
        return Err(LamaeError::Config(format!(
            "studies hold grayscale frames; model expects {} channels",
            cfg.grid.channels
        )));
    }
    let mut frames = Vec::with_capacity(sampled.views.len());
    for (slot, (&j, idx)) in sampled.views.iter().zip(&sampled.frames).enumerate() {
        let view = &study.views[j];
        let mut out = Vec::with_capacity(idx.len());
        for &k in idx {
            let f = &view[k];
            if f.width != size || f.height != size {
                return Err(LamaeError::Data(format!(
                    "study {} view {j} frame {k} is {}x{}, model expects {size}x{size}",
                    study.id, f.width, f.height
                )));
            }
            let mut values = frame_values(f);
            if let Some(t) = augment.and_then(|a| a.get(slot)) {
                values = t.apply(&values, size);
            }
            let tensor = Tensor::new(vec![1, size, size], values.into_iter().map(T::from_f64).collect())?;
            out.push(patchify(&tensor, &cfg.grid)?);
        }
        frames.push(out);
    }
    Ok(StudyInput {
        study_id: study.id.clone(),
        frames,
        labels: study.labels.clone(),
        target: study.target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_examples() {
        assert_eq!(frame_indices(40, 8, 32, 3), vec![3, 7, 11, 15, 19, 23, 27, 31]);
        assert_eq!(frame_indices(8, 8, 32, 0), (0..8).collect::<Vec<_>>());
        assert_eq!(frame_indices(3, 8, 32, 0), vec![0, 1, 2, 2, 2, 2, 2, 2]);
        assert_eq!(frame_indices(20, 8, 32, 0), vec![0, 2, 4, 6, 8, 10, 12, 14]);
    }

    #[test]
    fn scarce_views_fill_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_views_frames(&[40, 10], 8, 8, 32, &mut rng).unwrap();
        assert_eq!(s.views.len(), 8);
        assert!(s.views.contains(&0) && s.views.contains(&1));
        assert_eq!(s.pairs(), 64);
        assert!(s.views.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn plentiful_views_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_views_frames(&[40; 20], 8, 8, 32, &mut rng).unwrap();
        let mut v = s.views.clone();
        v.dedup();
        assert_eq!(v.len(), 8);
        for f in &s.frames {
            assert!(f.windows(2).all(|w| w[1] - w[0] == 4));
            assert!(*f.last().unwrap() < 40);
        }
    }

    #[test]
    fn identity_transform_preserves_image() {
        let side = 8;
        let src: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let t = CropRotate {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
            angle: 0.0,
        };
        let out = t.apply(&src, side);
        for (a, b) in out.iter().zip(&src) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_transforms_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = CropRotate::sample(&mut rng);
            let area = t.w * t.h;
            assert!((0.6 - 1e-9..=1.0 + 1e-9).contains(&area), "{t:?}");
            assert!(t.angle.abs() <= 10f64.to_radians());
        }
    }
}
